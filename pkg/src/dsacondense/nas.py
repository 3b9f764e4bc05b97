"""Ranking ConvNet variants by training on small proxy sets."""
from __future__ import annotations

import dataclasses
import itertools
import json
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluate import EvalConfig, test_accuracy, train_classifier
from .models import ArchError, ArchSpec

FULL_AXES = {
    "depth": (1, 2, 3, 4),
    "width": (32, 64, 128, 256),
    "activation": ("relu", "leakyrelu", "sigmoid"),
    "normalization": ("instance", "batch", "layer", "group", "none"),
    "pooling": ("avg", "max", "none"),
}
DESK_AXES = {
    "depth": (2, 3),
    "width": (32, 64),
    "activation": ("relu", "sigmoid"),
    "normalization": ("instance", "batch", "none"),
    "pooling": ("avg",),
}
AXIS_ORDER = ("depth", "width", "activation", "normalization", "pooling")


@dataclass
class NasGrid:
    axes: dict
    specs: list[ArchSpec]
    valid: list[bool]
    reasons: list[str]

    def __len__(self) -> int:
        return len(self.specs)


def enumerate_grid(axes: dict = FULL_AXES, channels: int = 1, im_size=(28, 28), num_classes: int = 10) -> NasGrid:
    """Cartesian product in lexicographic axis order; collapsing specs are flagged, not dropped."""
    for name in AXIS_ORDER:
        if not axes.get(name):
            raise ValueError(f"axis {name!r} must be nonempty")
    specs, valid, reasons = [], [], []
    for combo in itertools.product(*(axes[a] for a in AXIS_ORDER)):
        spec = ArchSpec(channels=channels, im_size=tuple(im_size), num_classes=num_classes,
                        **dict(zip(AXIS_ORDER, combo)))
        try:
            spec.validate()
            ok, why = True, ""
        except ArchError as exc:
            ok, why = False, str(exc)
        specs.append(spec)
        valid.append(ok)
        reasons.append(why)
    return NasGrid(dict(axes), specs, valid, reasons)


def rankdata(x) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    x = np.asarray(x, np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(a, b) -> float:
    """Rank correlation; Pearson on average ranks, nan when either list is constant."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"score lists must be 1-D and equally long, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise ValueError(f"need at least 2 scores, got {a.size}")
    ra, rb = rankdata(a), rankdata(b)
    da, db = ra - ra.mean(), rb - rb.mean()
    denom = math.sqrt(float(np.sum(da * da)) * float(np.sum(db * db)))
    if denom == 0.0:
        return float("nan")
    return float(np.clip(np.sum(da * db) / denom, -1.0, 1.0))


def spec_seed(seed: int, spec: ArchSpec) -> np.random.Generator:
    """Generator keyed by the architecture label, so equal architectures train identically."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(spec.label.encode()),)))


@dataclass
class ProxyResult:
    scores: list[float]
    seconds: list[float]
    errors: dict = field(default_factory=dict)


def proxy_rank(grid: NasGrid, images, labels, num_classes, cfg: EvalConfig, test_x, test_y,
               iterations: int | None = None, log=None) -> ProxyResult:
    """Test accuracy of every valid grid spec after training on the proxy set.

    Invalid or failing specs score nan; failures are recorded and the study continues.
    """
    scores, seconds, errors = [], [], {}
    for i, (spec, ok) in enumerate(zip(grid.specs, grid.valid)):
        start = time.perf_counter()
        if not ok:
            scores.append(float("nan"))
            seconds.append(0.0)
            errors[i] = grid.reasons[i]
            continue
        try:
            net = train_classifier(images, labels, num_classes, dataclasses.replace(cfg, arch=spec),
                                   spec_seed(cfg.seed, spec), iterations=iterations)
            scores.append(test_accuracy(net, test_x, test_y, cfg.test_batch))
        except Exception as exc:  # keep ranking the rest of the grid
            scores.append(float("nan"))
            errors[i] = f"{type(exc).__name__}: {exc}"
        seconds.append(time.perf_counter() - start)
        if log is not None:
            log(f"{spec.label}: {scores[-1]:.4f} ({seconds[-1]:.1f}s)")
    return ProxyResult(scores, seconds, errors)


def top_slice(reference, fraction: float = 0.05, minimum: int = 2) -> np.ndarray:
    """Indices of the best ``fraction`` by reference score; ties resolved by grid order."""
    ref = np.asarray(reference, np.float64)
    finite = np.flatnonzero(np.isfinite(ref))
    k = min(len(finite), max(minimum, math.ceil(fraction * len(finite))))
    order = finite[np.argsort(-ref[finite], kind="mergesort")]
    return np.sort(order[:k])


@dataclass
class RankStudy:
    name: str
    scores: list[float]
    reference: list[float]
    rho: float
    rho_top: float
    top: list[int]
    best_index: int
    best_reference: float
    seconds: float
    storage_images: int
    errors: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def write_scatter(self, path) -> Path:
        path = Path(path)
        rows = ["index\tproxy\treference"] + [f"{i}\t{p}\t{r}" for i, (p, r) in enumerate(zip(self.scores, self.reference))]
        path.write_text("\n".join(rows) + "\n")
        return path


def summarize(name: str, result: ProxyResult, reference, storage_images: int, fraction: float = 0.05) -> RankStudy:
    scores = np.asarray(result.scores, np.float64)
    ref = np.asarray(reference, np.float64)
    both = np.isfinite(scores) & np.isfinite(ref)
    rho = spearman(scores[both], ref[both]) if both.sum() >= 2 else float("nan")
    top = top_slice(np.where(both, ref, np.nan), fraction)
    rho_top = spearman(scores[top], ref[top]) if len(top) >= 2 else float("nan")
    best = int(np.nanargmax(np.where(both, scores, np.nan))) if both.any() else -1
    return RankStudy(name, scores.tolist(), ref.tolist(), rho, rho_top, top.tolist(), best,
                     float(ref[best]) if best >= 0 else float("nan"), float(np.sum(result.seconds)),
                     storage_images, dict(result.errors))


def study(grid: NasGrid, proxies: dict, reference, test_x, test_y, num_classes: int, fraction: float = 0.05,
          log=None) -> dict:
    """Scores each proxy against the reference scores.

    ``proxies`` maps a name to ``(images, labels, EvalConfig, iterations)``;
    ``reference`` is either a score list or such a tuple, in which case it
    is computed first.
    """
    if isinstance(reference, tuple):
        ref = proxy_rank(grid, reference[0], reference[1], num_classes, reference[2], test_x, test_y,
                         reference[3], log)
        ref_scores = ref.scores
    else:
        ref_scores = list(reference)
    out = {}
    for name, (images, labels, cfg, iters) in proxies.items():
        res = proxy_rank(grid, images, labels, num_classes, cfg, test_x, test_y, iters, log)
        out[name] = summarize(name, res, ref_scores, len(images), fraction)
    return out


def save_study(studies: dict, directory, resolved_ini: str | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    summary = {k: v.to_dict() for k, v in studies.items()}
    if resolved_ini is not None:
        summary["resolved_ini"] = resolved_ini
    (directory / "study.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    for k, v in studies.items():
        v.write_scatter(directory / f"scatter_{k}.tsv")
    return directory


__all__ = [
    "DESK_AXES",
    "FULL_AXES",
    "NasGrid",
    "ProxyResult",
    "RankStudy",
    "enumerate_grid",
    "proxy_rank",
    "rankdata",
    "save_study",
    "spearman",
    "study",
    "summarize",
    "top_slice",
]
