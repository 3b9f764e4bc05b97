"""Command-line entry point: ``dsacondense <command> [--config FILE] [section.key=value ...]``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import data, nas
from .augment import AugDistribution, AugError
from .condense import (ABLATION_SCHEMES, CondenseError, DivergenceError, GradDiagnostics, ablation_scheme,
                       condense)
from .config import ConfigError, ExperimentConfig
from .evaluate import cross_architecture, evaluate_protocol, evaluate_sets, random_coreset
from .models import ArchError
from .runtime import tune_allocator

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
COMMANDS = ("condense", "eval", "ablate", "crossarch", "nas", "export", "diagnose")


def exit_code(exc: BaseException) -> int:
    """Maps an exception, or the first typed cause in its chain, to an exit status."""
    seen = exc
    while seen is not None:
        if isinstance(seen, (DivergenceError, FloatingPointError)):
            return EXIT_DIVERGED
        if isinstance(seen, (data.DataError, FileNotFoundError)):
            return EXIT_DATA
        if isinstance(seen, (ConfigError, ArchError, AugError, CondenseError)):
            return EXIT_CONFIG
        seen = seen.__cause__
    return 1


def _log(msg) -> None:
    print(msg, file=sys.stderr, flush=True)


def load_data(cfg: ExperimentConfig):
    d = cfg.dataset
    ds = data.load_dataset(d.name, d.root)
    if d.train is not None or d.test is not None:
        ds = ds.subset(d.train, d.test, d.subset_seed)
    return ds


def _embed(syn, cfg: ExperimentConfig):
    syn.config = {"condense": syn.config, "resolved_ini": cfg.to_ini()}
    return syn


def _ini_comment(cfg: ExperimentConfig) -> list[str]:
    return ["# " + line for line in cfg.to_ini().splitlines()]


def write_trace(path: Path, trace, partial: bool = False, cfg: ExperimentConfig | None = None) -> Path:
    lines = ["# PARTIAL: run aborted"] if partial else []
    lines += _ini_comment(cfg) if cfg is not None else []
    lines.append("iteration\tloss\tseconds")
    for e in trace:
        e = e if isinstance(e, dict) else dataclasses.asdict(e)
        lines.append(f"{e['iteration']}\t{e['loss']!r}\t{e['seconds']:.3f}")
    path.write_text("\n".join(lines) + "\n")
    return path


def cmd_condense(cfg: ExperimentConfig, args) -> int:
    ds = load_data(cfg)
    out = cfg.output
    diag = GradDiagnostics() if cfg.condense.diag_iterations else None

    def checkpoint(syn):
        snap = syn.copy()
        snap.mean, snap.std = ds.mean, ds.std
        _embed(snap, cfg)
        data.save_synthetic(out / "checkpoint.dsa", snap)
        write_trace(out / "trace.tsv", snap.trace, cfg=cfg)

    try:
        syn = condense(cfg.condense, ds, diag, log=_log, checkpoint=checkpoint)
    except DivergenceError as exc:
        write_trace(out / "trace.partial.tsv", exc.trace, partial=True, cfg=cfg)
        raise
    syn.mean, syn.std = ds.mean, ds.std
    _embed(syn, cfg)
    data.save_synthetic(out / "synthetic.dsa", syn)
    write_trace(out / "trace.tsv", syn.trace, cfg=cfg)
    data.export_grid(syn, out / "grid.png", comment=cfg.to_ini())
    if diag is not None:
        _write_diagnostics(out / "diagnostics.json", {"run": diag}, cfg)
    _log(f"wrote {out / 'synthetic.dsa'}")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    ds = load_data(cfg)
    if args.sets:
        sets = [data.load_synthetic(p) for p in args.sets]
        report = evaluate_sets(sets, cfg.eval, ds.test_x, ds.test_y, args.jobs)
        report.config["sets"] = [str(p) for p in args.sets]
    else:
        report, _ = evaluate_protocol(cfg.condense, cfg.eval, ds, args.jobs, log=_log)
    report.config["resolved_ini"] = cfg.to_ini()
    report.save(cfg.output / "report")
    print(f"accuracy {report.mean:.4f} +- {report.std:.4f} over {len(report.accuracies)} runs")
    return EXIT_OK


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    ds = load_data(cfg)
    ccfg, ecfg = ablation_scheme(args.scheme, cfg.condense, cfg.eval)
    report, _ = evaluate_protocol(ccfg, ecfg, ds, args.jobs, log=_log)
    report.config["scheme"] = args.scheme
    report.config["resolved_ini"] = cfg.to_ini()
    report.save(cfg.output / f"ablate_{args.scheme}")
    real, synth, test = ABLATION_SCHEMES[args.scheme]
    row = f"{args.scheme}\t{real}\t{synth}\t{'aug' if test else 'none'}\t{report.mean:.4f}\t{report.std:.4f}\n"
    header = "\n".join(_ini_comment(cfg) + ["scheme\treal\tsynthetic\ttest\tmean\tstd"]) + "\n"
    (cfg.output / f"ablate_{args.scheme}.row").write_text(header + row)
    print(row, end="")
    return EXIT_OK


def cmd_crossarch(cfg: ExperimentConfig, args) -> int:
    ds = load_data(cfg)
    rows = [config_mod.arch_from_label(a, cfg.arch) for a in cfg.crossarch.condense_archs]
    cols = [config_mod.arch_from_label(a, cfg.arch) for a in cfg.crossarch.eval_archs]
    grid = cross_architecture(rows, cols, cfg.condense, cfg.eval, ds, args.jobs)
    lines = ["condense\\eval\t" + "\t".join(c.label for c in cols)]
    for r in rows:
        cells = [grid[(r.label, c.label)] for c in cols]
        lines.append(r.label + "\t" + "\t".join(f"{x.mean:.4f}+-{x.std:.4f}" for x in cells))
    (cfg.output / "crossarch.tsv").write_text("\n".join(_ini_comment(cfg) + lines) + "\n")
    payload = {f"{k[0]} -> {k[1]}": v.to_dict(timing=False) for k, v in grid.items()}
    (cfg.output / "crossarch.json").write_text(json.dumps({"cells": payload, "resolved_ini": cfg.to_ini()},
                                                          indent=2, sort_keys=True, default=str))
    print("\n".join(lines))
    return EXIT_OK


def run_nas(cfg: ExperimentConfig, ds, log=None) -> dict:
    """Desk (or full) grid ranked by each proxy in ``nas.proxies`` against a reference run."""
    n = cfg.nas
    small = ds.subset(n.train, n.test, cfg.dataset.subset_seed)
    axes = nas.DESK_AXES if n.grid == "desk" else nas.FULL_AXES
    grid = nas.enumerate_grid(axes, small.channels, small.im_size, small.num_classes)
    ccfg = dataclasses.replace(cfg.condense, ipc=n.proxy_ipc, iterations=n.condense_iterations)
    n_images = n.proxy_ipc * small.num_classes
    proxy_cfg = dataclasses.replace(cfg.eval, epochs=n.proxy_epochs, batch=min(cfg.eval.batch, n_images))
    budget = n.proxy_epochs * -(-n_images // proxy_cfg.batch)
    ref_cfg = dataclasses.replace(cfg.eval, epochs=n.reference_epochs)
    proxies = {}
    condense_seconds = 0.0
    if "random" in n.proxies:
        rand_set = random_coreset(small, n.proxy_ipc, np.random.default_rng(cfg.experiment.seed))
        proxies["random"] = (rand_set.images, rand_set.labels, proxy_cfg, None)
    if "dsa" in n.proxies:
        t0 = time.perf_counter()
        dsa_set = condense(ccfg, small, log=log)
        condense_seconds = time.perf_counter() - t0
        proxies["dsa"] = (dsa_set.images, dsa_set.labels, proxy_cfg, None)
    if "early_stopping" in n.proxies:
        es_cfg = dataclasses.replace(proxy_cfg, batch=cfg.eval.batch)
        proxies["early_stopping"] = (small.train_x, small.train_y, es_cfg, budget)
    ref = nas.proxy_rank(grid, small.train_x, small.train_y, small.num_classes, ref_cfg, small.test_x, small.test_y,
                         None, log)
    studies = {}
    for name, (x, y, pcfg, iters) in proxies.items():
        res = nas.proxy_rank(grid, x, y, small.num_classes, pcfg, small.test_x, small.test_y, iters, log)
        studies[name] = nas.summarize(name, res, ref.scores, len(x), n.fraction)
    if "dsa" in studies:
        studies["dsa"].seconds += condense_seconds
    studies["reference"] = nas.summarize("reference", ref, ref.scores, len(small.train_x), n.fraction)
    return studies


def cmd_nas(cfg: ExperimentConfig, args) -> int:
    ds = load_data(cfg)
    studies = run_nas(cfg, ds, _log)
    nas.save_study(studies, cfg.output, cfg.to_ini())
    for name, st in studies.items():
        print(f"{name}\trho={st.rho:.3f}\trho_top={st.rho_top:.3f}\tbest_ref={st.best_reference:.4f}"
              f"\tseconds={st.seconds:.0f}\timages={st.storage_images}")
    return EXIT_OK


def cmd_export(cfg: ExperimentConfig, args) -> int:
    if not args.sets:
        raise ConfigError("export needs a synthetic-set file")
    for p in args.sets:
        syn = data.load_synthetic(p)
        target = Path(args.out) if args.out and len(args.sets) == 1 else Path(p).with_suffix(".png")
        data.export_grid(syn, target, comment=syn.config.get("resolved_ini"))
        print(target)
    return EXIT_OK


def _write_diagnostics(path: Path, runs: dict, cfg: ExperimentConfig) -> None:
    payload = {"resolved_ini": cfg.to_ini()}
    for name, diag in runs.items():
        payload[name] = {str(k): {"syn_median": diag.median(k, "syn"), "real_median": diag.median(k, "real"),
                                  "syn_histogram": [a.tolist() for a in diag.histogram(k, "syn")],
                                  "real_histogram": [a.tolist() for a in diag.histogram(k, "real")]}
                         for k in sorted(diag.syn)}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))


def run_diagnose(cfg: ExperimentConfig, ds, log=None) -> dict:
    """Gradient-magnitude diagnostics with augmentation off and on, otherwise matched."""
    iters = cfg.condense.diag_iterations or (cfg.condense.iterations - 1,)
    base = dataclasses.replace(cfg.condense, diag_iterations=tuple(iters))
    off = dataclasses.replace(base, aug=AugDistribution("none", digits=base.aug.digits, ranges=base.aug.ranges),
                              real_aug="none", syn_aug="none")
    runs = {}
    for name, c in (("dsa_off", off), ("dsa_on", base)):
        diag = GradDiagnostics()
        condense(c, ds, diag, log=log)
        runs[name] = diag
    return runs


def cmd_diagnose(cfg: ExperimentConfig, args) -> int:
    ds = load_data(cfg)
    runs = run_diagnose(cfg, ds, _log)
    _write_diagnostics(cfg.output / "diagnostics.json", runs, cfg)
    for name, diag in runs.items():
        for k in sorted(diag.syn):
            print(f"{name}\titeration {k}\tmedian syn grad norm {diag.median(k, 'syn'):.6g}"
                  f"\tmedian real grad norm {diag.median(k, 'real'):.6g}")
    return EXIT_OK


HANDLERS = {"condense": cmd_condense, "eval": cmd_eval, "ablate": cmd_ablate, "crossarch": cmd_crossarch,
            "nas": cmd_nas, "export": cmd_export, "diagnose": cmd_diagnose}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsacondense", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "ablate":
            p.add_argument("scheme", choices=sorted(ABLATION_SCHEMES))
        p.add_argument("--config", "-c", help="INI experiment config")
        p.add_argument("--jobs", "-j", type=int, default=1, help="parallel evaluation cells")
        if name in ("eval", "export"):
            p.add_argument("--set", dest="sets", action="append", default=[], help="saved synthetic-set file")
        if name == "export":
            p.add_argument("--out", help="output image path (.png or .ppm)")
        p.add_argument("overrides", nargs="*", help="section.key=value")
    return parser


def run(command: str, config_path=None, overrides=(), **kw) -> int:
    """Programmatic equivalent of the command line; returns the exit status."""
    argv = [command] + ([kw.pop("scheme")] if command == "ablate" else [])
    if config_path is not None:
        argv += ["--config", str(config_path)]
    for s in kw.pop("sets", []):
        argv += ["--set", str(s)]
    for k, v in kw.items():
        argv += [f"--{k}", str(v)]
    return main(argv + list(overrides))


def main(argv=None) -> int:
    tune_allocator()
    args = build_parser().parse_args(argv)
    try:
        cfg = config_mod.load(args.config, args.overrides)
        cfg.output.mkdir(parents=True, exist_ok=True)
        (cfg.output / "FAILED").unlink(missing_ok=True)
        if args.jobs < 1:
            raise ConfigError(f"--jobs must be at least 1, got {args.jobs}")
        cfg.write(cfg.output / "resolved.ini")
        return HANDLERS[args.command](cfg, args)
    except Exception as exc:
        code = exit_code(exc)
        _log(f"error ({type(exc).__name__}): {exc}")
        try:
            if "cfg" in locals():
                (cfg.output / "FAILED").write_text(f"{type(exc).__name__}: {exc}\nexit status {code}\n")
        except OSError:
            pass
        return code


if __name__ == "__main__":
    sys.exit(main())
