"""Training classifiers from scratch on small sets and scoring them on real test data."""
from __future__ import annotations

import dataclasses
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment
from .augment import AugDistribution
from .autodiff import Tensor, grad, no_grad, functional as F
from .models import SGD, ArchSpec, Network, make_network
from .sets import Dataset, SyntheticSet


class EvalError(RuntimeError):
    """A failure inside the evaluation grid, annotated with its cell."""


@dataclass(frozen=True)
class EvalConfig:
    arch: ArchSpec = field(default_factory=ArchSpec)
    epochs: int = 300
    lr: float = 0.01
    decay_epoch: int | None = None  # defaults to epochs // 2
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch: int = 256
    aug: AugDistribution = field(default_factory=AugDistribution)
    sets: int = 5
    nets: int = 20
    seed: int = 0
    test_batch: int = 500

    def validate(self) -> None:
        if self.sets < 1 or self.nets < 1:
            raise ValueError(f"sets and nets must be at least 1, got {self.sets}, {self.nets}")
        if self.epochs < 0 or self.lr <= 0 or self.batch < 1:
            raise ValueError(f"invalid schedule: epochs={self.epochs}, lr={self.lr}, batch={self.batch}")
        self.aug.validate()

    def snapshot(self) -> dict:
        out = dataclasses.asdict(self)
        out["arch"] = self.arch.to_config()
        out["decay_epoch"] = self.decay_epoch if self.decay_epoch is not None else self.epochs // 2
        return out


@dataclass
class EvalReport:
    accuracies: list[float]
    cells: list[tuple[int, int]]
    config: dict
    seconds: float = 0.0

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    def to_dict(self, timing: bool = True) -> dict:
        out = {"accuracies": self.accuracies, "cells": [list(c) for c in self.cells], "mean": self.mean,
               "std": self.std, "config": self.config}
        if timing:
            out["seconds"] = self.seconds
        return out

    def to_json(self, timing: bool = False) -> str:
        return json.dumps(self.to_dict(timing), indent=2, sort_keys=True, default=_json_default)

    def to_text(self) -> str:
        lines = [f"# config {json.dumps(self.config, sort_keys=True, default=_json_default)}",
                 "set\tnet\taccuracy"]
        lines += [f"{s}\t{n}\t{a:.6f}" for (s, n), a in zip(self.cells, self.accuracies)]
        lines.append(f"mean\t{self.mean:.6f}\tstd\t{self.std:.6f}")
        return "\n".join(lines) + "\n"

    def save(self, stem) -> tuple[Path, Path]:
        """Writes ``stem.txt`` and ``stem.json``; wall-clock goes to ``stem.timing`` so reruns stay byte-identical."""
        stem = Path(stem)
        txt, js = stem.with_suffix(".txt"), stem.with_suffix(".json")
        txt.write_text(self.to_text())
        js.write_text(self.to_json())
        stem.with_suffix(".timing").write_text(f"{self.seconds:.3f}\n")
        return txt, js


def _json_default(v):
    if isinstance(v, (np.integer, np.floating)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if dataclasses.is_dataclass(v):
        return dataclasses.asdict(v)
    raise TypeError(f"cannot serialize {type(v).__name__}")


def cell_rng(seed: int, set_index: int, net_index: int) -> np.random.Generator:
    """Generator for one (set, net) cell, independent of execution order."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(set_index, net_index)))


def _arch_for(spec: ArchSpec, images: np.ndarray, num_classes: int) -> ArchSpec:
    return dataclasses.replace(spec, channels=images.shape[1], im_size=tuple(images.shape[2:]),
                               num_classes=num_classes)


def train_classifier(images: np.ndarray, labels: np.ndarray, num_classes: int, cfg: EvalConfig,
                     rng: np.random.Generator, dtype=np.float32, iterations: int | None = None) -> Network:
    """Kaiming-initialized network trained by momentum SGD with per-image augmentation.

    With ``iterations`` set, training runs that many minibatch steps over
    cyclic permutations instead of ``cfg.epochs`` epochs, decaying the rate
    halfway through.
    """
    spec = _arch_for(cfg.arch, images, num_classes)
    net = make_network(spec, rng, dtype)
    opt = SGD(net.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    batch = min(cfg.batch, len(images))
    images = np.asarray(images, dtype)
    labels = np.asarray(labels)
    if iterations is None:
        decay = cfg.decay_epoch if cfg.decay_epoch is not None else cfg.epochs // 2
        steps_per_epoch = -(-len(images) // batch)
        total, decay_step = cfg.epochs * steps_per_epoch, decay * steps_per_epoch
    else:
        total, decay_step = iterations, iterations // 2
    net.train()
    order, pos = rng.permutation(len(images)), 0
    for step in range(total):
        if step == decay_step:
            opt.lr *= cfg.decay_factor
        if pos >= len(images):
            order, pos = rng.permutation(len(images)), 0
        idx = order[pos : pos + batch]
        pos += batch
        with no_grad():
            x = augment.augment_independent(Tensor(images[idx]), cfg.aug, rng)
        loss = F.softmax_cross_entropy(net.forward(x, first_order=True), labels[idx])
        value = float(loss.data)
        if not np.isfinite(value):
            raise FloatingPointError(f"training loss became {value} at step {step}")
        opt.step(grad(loss, net.parameters()))
    return net.eval()


def predict(net: Network, images: np.ndarray, batch: int = 500) -> np.ndarray:
    out = []
    with no_grad():
        for s in range(0, len(images), batch):
            logits = net.forward(Tensor(images[s : s + batch], dtype=net.dtype), first_order=True)
            out.append(np.argmax(logits.data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, np.int64)


def test_accuracy(net: Network, images: np.ndarray, labels: np.ndarray, batch: int = 500) -> float:
    """Top-1 accuracy over the whole given split."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty test split")
    return float(np.mean(predict(net, images, batch) == labels))


def _cell(args) -> float:
    images, labels, num_classes, cfg, s, n, test_x, test_y = args
    try:
        net = train_classifier(images, labels, num_classes, cfg, cell_rng(cfg.seed, s, n))
        return test_accuracy(net, test_x, test_y, cfg.test_batch)
    except Exception as exc:
        raise EvalError(f"set {s}, net {n}: {type(exc).__name__}: {exc}") from exc


def evaluate_sets(sets: list[SyntheticSet], cfg: EvalConfig, test_x: np.ndarray, test_y: np.ndarray,
                  jobs: int = 1, nets: int | None = None) -> EvalReport:
    """Trains ``nets`` networks per given set; sees only the sets and the test split."""
    cfg.validate()
    nets = cfg.nets if nets is None else nets
    start = time.perf_counter()
    tasks = [(st.images, st.labels, st.num_classes, cfg, s, n, test_x, test_y)
             for s, st in enumerate(sets) for n in range(nets)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            accs = list(pool.map(_cell, tasks))
    else:
        accs = [_cell(t) for t in tasks]
    cells = [(t[4], t[5]) for t in tasks]
    return EvalReport(accs, cells, {"eval": cfg.snapshot()}, time.perf_counter() - start)


def evaluate_protocol(condense_cfg, cfg: EvalConfig, dataset: Dataset, jobs: int = 1, condense_fn=None,
                      log=None) -> tuple[EvalReport, list[SyntheticSet]]:
    """``cfg.sets`` condensations with split seeds, each scored by ``cfg.nets`` networks."""
    from .condense import condense

    condense_fn = condense_fn or condense
    cfg.validate()
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(condense_cfg.seed).spawn(cfg.sets)]
    sets = []
    for i, seed in enumerate(seeds):
        try:
            sets.append(condense_fn(dataclasses.replace(condense_cfg, seed=seed), dataset))
        except Exception as exc:
            raise EvalError(f"set {i}: condensation failed: {exc}") from exc
        if log is not None:
            log(f"set {i} condensed (seed {seed})")
    report = evaluate_sets(sets, cfg, dataset.test_x, dataset.test_y, jobs)
    report.config["condense"] = condense_cfg.snapshot()
    report.config["set_seeds"] = seeds
    return report, sets


def cross_architecture(condense_archs, eval_archs, condense_cfg, cfg: EvalConfig, dataset: Dataset,
                       jobs: int = 1, condense_fn=None) -> dict:
    """Grid of reports keyed by (condense label, eval label)."""
    from .condense import condense

    condense_fn = condense_fn or condense
    out = {}
    for r, carch in enumerate(condense_archs):
        ccfg = dataclasses.replace(condense_cfg, arch=carch)
        seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(ccfg.seed).spawn(cfg.sets)]
        try:
            sets = [condense_fn(dataclasses.replace(ccfg, seed=s), dataset) for s in seeds]
        except Exception as exc:
            raise EvalError(f"row {r} ({carch.label}): {exc}") from exc
        for c, earch in enumerate(eval_archs):
            try:
                rep = evaluate_sets(sets, dataclasses.replace(cfg, arch=earch), dataset.test_x, dataset.test_y, jobs)
            except Exception as exc:
                raise EvalError(f"row {r} ({carch.label}), column {c} ({earch.label}): {exc}") from exc
            rep.config["condense"] = ccfg.snapshot()
            out[(carch.label, earch.label)] = rep
    return out


def random_coreset(dataset: Dataset, ipc: int, rng: np.random.Generator) -> SyntheticSet:
    """Class-stratified uniform sample of real training images, packaged as a synthetic set."""
    from .condense import init_synthetic

    coreset = init_synthetic(dataset, ipc, "real", rng, dataset.train_x.dtype)
    coreset.init = "random-coreset"
    return coreset


__all__ = [
    "EvalConfig",
    "EvalError",
    "EvalReport",
    "cell_rng",
    "cross_architecture",
    "evaluate_protocol",
    "evaluate_sets",
    "predict",
    "random_coreset",
    "test_accuracy",
    "train_classifier",
]
