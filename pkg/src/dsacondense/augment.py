"""Differentiable parametric image transforms and the Siamese sampling policy.

A transform is described by an ``AugParam`` (one concrete draw) sampled from
an ``AugDistribution``.  Every transform is a fixed linear or affine map of
the input pixels, so it is differentiable in the input to any order.
Identity parameters return the input tensor untouched.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat, flip, functional as F, pad

KINDS = ("crop", "cutout", "flip", "scale", "rotate", "color")
STRATEGIES = ("none", "single", "combination")
DIGIT_DATASETS = ("mnist", "svhn")


class AugError(ValueError):
    """Invalid augmentation distribution or out-of-range parameters."""


@dataclass(frozen=True)
class AugRanges:
    """Parameter ranges; sizes are fractions of the image side."""

    crop_frac: float = 0.125
    cutout_frac: float = 0.5
    scale: tuple[float, float] = (1 / 1.2, 1.2)
    rotate_deg: float = 15.0
    brightness: tuple[float, float] = (0.0, 1.0)
    brightness_amp: float = 1.0
    saturation: tuple[float, float] = (0.0, 2.0)
    contrast: tuple[float, float] = (0.5, 1.5)
    flip_prob: float = 0.5

    def crop_pad(self, hw) -> tuple[int, int]:
        return math.ceil(self.crop_frac * hw[0]), math.ceil(self.crop_frac * hw[1])

    def cutout_side(self, hw) -> int:
        return math.ceil(self.cutout_frac * min(hw))


@dataclass(frozen=True)
class AugParam:
    """One concrete transform.  Unused fields keep their identity values."""

    kind: str = "none"
    shift: tuple[int, int] = (0, 0)
    center: tuple[int, int] = (0, 0)
    side: int = 0
    mirror: bool = False
    scale: tuple[float, float] = (1.0, 1.0)
    angle: float = 0.0
    brightness: float = 0.5
    saturation: float = 1.0
    contrast: float = 1.0

    def is_identity(self) -> bool:
        return self == AugParam(kind=self.kind, center=self.center)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


IDENTITY = AugParam()


@dataclass(frozen=True)
class AugDistribution:
    strategy: str = "none"
    kind: str | None = None
    digits: bool = False
    kinds: tuple[str, ...] = KINDS
    ranges: AugRanges = field(default_factory=AugRanges)

    @classmethod
    def for_dataset(cls, strategy: str, dataset: str, kind: str | None = None, **kw) -> "AugDistribution":
        return cls(strategy=strategy, kind=kind, digits=dataset.lower() in DIGIT_DATASETS, **kw)

    def admissible(self) -> tuple[str, ...]:
        if self.strategy == "none":
            return ()
        if self.strategy == "single":
            return (self.kind,)
        return tuple(k for k in self.kinds if not (self.digits and k == "flip"))

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise AugError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.strategy == "single" and self.kind not in KINDS:
            raise AugError(f"single strategy needs a kind from {KINDS}, got {self.kind!r}")
        unknown = set(self.kinds) - set(KINDS)
        if unknown:
            raise AugError(f"unknown transform kinds {sorted(unknown)}")
        if self.strategy == "combination" and not self.admissible():
            raise AugError("combination strategy has no admissible transform kinds")


def sample_omega(dist: AugDistribution, rng: np.random.Generator, im_size) -> AugParam:
    """Draws one transform: kind uniform over the admissible set, then its parameters."""
    dist.validate()
    kinds = dist.admissible()
    if dist.strategy == "none":
        return IDENTITY
    kind = kinds[rng.integers(len(kinds))]
    r = dist.ranges
    h, w = im_size
    if kind == "crop":
        py, px = r.crop_pad((h, w))
        return AugParam(kind, shift=(int(rng.integers(-py, py + 1)), int(rng.integers(-px, px + 1))))
    if kind == "cutout":
        return AugParam(kind, center=(int(rng.integers(h)), int(rng.integers(w))), side=r.cutout_side((h, w)))
    if kind == "flip":
        return AugParam(kind, mirror=bool(rng.random() < r.flip_prob))
    if kind == "scale":
        lo, hi = r.scale
        return AugParam(kind, scale=(float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi))))
    if kind == "rotate":
        return AugParam(kind, angle=float(rng.uniform(-r.rotate_deg, r.rotate_deg)))
    return AugParam(
        kind,
        brightness=float(rng.uniform(*r.brightness)),
        saturation=float(rng.uniform(*r.saturation)),
        contrast=float(rng.uniform(*r.contrast)),
    )


def check_range(omega: AugParam, im_size, ranges: AugRanges = AugRanges()) -> None:
    h, w = im_size
    tol = 1e-12

    def inside(v, lo, hi, name):
        if not (lo - tol <= v <= hi + tol):
            raise AugError(f"{omega.kind}: {name}={v} outside [{lo}, {hi}]")

    if omega.kind not in KINDS + ("none",):
        raise AugError(f"unknown transform kind {omega.kind!r}")
    py, px = ranges.crop_pad((h, w))
    inside(omega.shift[0], -py, py, "shift_y")
    inside(omega.shift[1], -px, px, "shift_x")
    inside(omega.side, 0, ranges.cutout_side((h, w)), "side")
    inside(omega.center[0], 0, h - 1, "center_y")
    inside(omega.center[1], 0, w - 1, "center_x")
    for s in omega.scale:
        if s != 1.0:
            inside(s, *ranges.scale, "scale")
    inside(omega.angle, -ranges.rotate_deg, ranges.rotate_deg, "angle")
    if omega.brightness != 0.5:
        inside(omega.brightness, *ranges.brightness, "brightness")
    if omega.saturation != 1.0:
        inside(omega.saturation, *ranges.saturation, "saturation")
    if omega.contrast != 1.0:
        inside(omega.contrast, *ranges.contrast, "contrast")


# ----------------------------------------------------------------------
# transforms
# ----------------------------------------------------------------------

def _snap(m: np.ndarray) -> np.ndarray:
    """Rounds entries within 1e-12 of an integer so right-angle rotations are exact."""
    r = np.round(m)
    return np.where(np.abs(m - r) < 1e-12, r, m)


def _warp(x: Tensor, inverse: np.ndarray) -> Tensor:
    """Samples ``x`` at ``center + inverse @ (p - center)`` for every output pixel p."""
    h, w = x.shape[2:]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64) - cy, np.arange(w, dtype=np.float64) - cx, indexing="ij")
    inv = _snap(inverse)
    src_y = inv[0, 0] * yy + inv[0, 1] * xx + cy
    src_x = inv[1, 0] * yy + inv[1, 1] * xx + cx
    return F.grid_sample(x, _snap(src_y), _snap(src_x))


def _crop(x: Tensor, omega: AugParam, ranges: AugRanges) -> Tensor:
    h, w = x.shape[2:]
    py, px = ranges.crop_pad((h, w))
    dy, dx = omega.shift
    padded = pad(x, ((0, 0), (0, 0), (py, py), (px, px)))
    return padded[:, :, py + dy : py + dy + h, px + dx : px + dx + w]


def cutout_mask(hw, center, side) -> np.ndarray:
    h, w = hw
    mask = np.ones((h, w))
    top, left = center[0] - side // 2, center[1] - side // 2
    mask[max(top, 0) : max(top + side, 0), max(left, 0) : max(left + side, 0)] = 0.0
    return mask


def _color(x: Tensor, omega: AugParam, ranges: AugRanges) -> Tensor:
    if omega.brightness != 0.5:
        x = x + (omega.brightness - 0.5) * ranges.brightness_amp
    if omega.saturation != 1.0:
        m = x.mean(axis=1, keepdims=True)
        x = (x - m) * omega.saturation + m
    if omega.contrast != 1.0:
        m = x.mean(axis=(1, 2, 3), keepdims=True)
        x = (x - m) * omega.contrast + m
    return x


def apply(batch: Tensor, omega: AugParam, ranges: AugRanges = AugRanges()) -> Tensor:
    """Applies one transform to every image of an NCHW batch."""
    if not isinstance(batch, Tensor):
        batch = Tensor(batch)
    if batch.ndim != 4 or batch.shape[0] == 0:
        raise AugError(f"expected a nonempty NCHW batch, got shape {batch.shape}")
    hw = batch.shape[2:]
    check_range(omega, hw, ranges)
    if omega.is_identity():
        return batch
    kind = omega.kind
    if kind == "crop":
        return _crop(batch, omega, ranges)
    if kind == "cutout":
        if omega.side == 0:
            return batch
        return batch * Tensor(cutout_mask(hw, omega.center, omega.side), dtype=batch.dtype)
    if kind == "flip":
        return flip(batch, 3)
    if kind == "scale":
        sy, sx = omega.scale
        return _warp(batch, np.diag([1.0 / sy, 1.0 / sx]))
    if kind == "rotate":
        t = math.radians(omega.angle)
        # output p reads the source at R(-t) p
        inverse = np.array([[math.cos(t), math.sin(t)], [-math.sin(t), math.cos(t)]])
        return _warp(batch, inverse)
    return _color(batch, omega, ranges)


class SiamesePair(tuple):
    """``(real, syn)`` batches plus the transform record applied to each side."""

    def __new__(cls, real, syn, real_omega: AugParam, syn_omega: AugParam):
        pair = super().__new__(cls, (real, syn))
        pair.real_omega, pair.syn_omega = real_omega, syn_omega
        return pair


def siamese_apply(real: Tensor, syn: Tensor, omega: AugParam, ranges: AugRanges = AugRanges()) -> SiamesePair:
    """Applies the same ``omega`` to a real and a synthetic batch."""
    rs, ss = tuple(real.shape[1:]), tuple(syn.shape[1:])
    if rs != ss:
        raise AugError(f"siamese pair must share (C, H, W), got {rs} and {ss}")
    return SiamesePair(apply(real, omega, ranges), apply(syn, omega, ranges), omega, omega)


def augment_independent(batch: Tensor, dist: AugDistribution, rng: np.random.Generator) -> Tensor:
    """Per-image augmentation: each image gets its own freshly sampled transform."""
    if dist.strategy == "none":
        return batch if isinstance(batch, Tensor) else Tensor(batch)
    if not isinstance(batch, Tensor):
        batch = Tensor(batch)
    hw = batch.shape[2:]
    parts = [apply(batch[i : i + 1], sample_omega(dist, rng, hw), dist.ranges) for i in range(batch.shape[0])]
    return concat(parts, axis=0)


__all__ = [
    "AugDistribution",
    "AugError",
    "AugParam",
    "AugRanges",
    "DIGIT_DATASETS",
    "IDENTITY",
    "KINDS",
    "SiamesePair",
    "apply",
    "augment_independent",
    "check_range",
    "cutout_mask",
    "sample_omega",
    "siamese_apply",
]
