"""Synthetic-set learning by gradient matching with shared augmentation."""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from . import augment
from .augment import AugDistribution, AugParam
from .autodiff import Tensor, grad, no_grad, functional as F
from .matching import matching_loss, real_gradients
from .models import SGD, ArchSpec, make_network
from .sets import Dataset, SyntheticSet, even_labels

AUG_MODES = ("none", "siamese", "independent")
INNER_DEFAULTS = {1: (1, 1), 10: (10, 50), 50: (50, 10)}
DIVERGENCE_LIMIT = 1e6


class CondenseError(ValueError):
    """Invalid configuration or dataset for condensation."""


class DivergenceError(RuntimeError):
    """Matching loss became non-finite or exceeded the abort threshold."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class CondenseConfig:
    ipc: int = 1
    iterations: int = 1000
    outer_steps: int | None = None  # T; defaults by ipc
    syn_steps: int = 1
    net_steps: int | None = None  # per-T network epochs; defaults by ipc
    lr_img: float = 0.1
    lr_net: float = 0.01
    momentum_img: float = 0.5
    momentum_net: float = 0.5
    batch_real: int = 256
    batch_syn: int = 256
    init: str = "real"
    aug: AugDistribution = field(default_factory=AugDistribution)
    real_aug: str = "siamese"
    syn_aug: str = "siamese"
    omegas_per_step: int = 1
    include_norm: bool = False
    arch: ArchSpec = field(default_factory=ArchSpec)
    seed: int = 0
    diag_iterations: tuple[int, ...] = ()
    checkpoint_every: int = 0  # 0 disables

    def inner(self) -> tuple[int, int]:
        t_def, n_def = INNER_DEFAULTS.get(self.ipc, (10, 50))
        return (self.outer_steps or t_def, self.net_steps or n_def)

    def validate(self) -> None:
        t, n = self.inner()
        counts = {"ipc": self.ipc, "outer_steps": t, "syn_steps": self.syn_steps, "net_steps": n,
                  "batch_real": self.batch_real, "batch_syn": self.batch_syn,
                  "omegas_per_step": self.omegas_per_step}
        for k, v in counts.items():
            if v < 1:
                raise CondenseError(f"{k} must be positive, got {v}")
        if self.checkpoint_every < 0:
            raise CondenseError(f"checkpoint_every must be nonnegative, got {self.checkpoint_every}")
        if self.iterations < 0:
            raise CondenseError(f"iterations must be nonnegative, got {self.iterations}")
        for k in ("lr_img", "lr_net"):
            if getattr(self, k) <= 0:
                raise CondenseError(f"{k} must be positive, got {getattr(self, k)}")
        if self.init not in ("real", "noise"):
            raise CondenseError(f"init must be 'real' or 'noise', got {self.init!r}")
        for k in ("real_aug", "syn_aug"):
            if getattr(self, k) not in AUG_MODES:
                raise CondenseError(f"{k} must be one of {AUG_MODES}, got {getattr(self, k)!r}")
        self.aug.validate()

    def snapshot(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "arch":
                v = v.to_config()
            elif f.name == "aug":
                v = dataclasses.asdict(v)
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        t, n = self.inner()
        out["outer_steps"], out["net_steps"] = t, n
        return out


@dataclass
class TraceEntry:
    iteration: int
    loss: float
    seconds: float


@dataclass
class GradDiagnostics:
    """Per-iteration lists of gradient norms for the synthetic and real batches."""

    syn: dict = field(default_factory=dict)
    real: dict = field(default_factory=dict)

    def record(self, k: int, syn_norm: float, real_norm: float) -> None:
        self.syn.setdefault(k, []).append(syn_norm)
        self.real.setdefault(k, []).append(real_norm)

    def median(self, k: int, which: str = "syn") -> float:
        return float(np.median(getattr(self, which)[k]))

    def histogram(self, k: int, which: str = "syn", bins: int = 20):
        return np.histogram(np.asarray(getattr(self, which)[k]), bins=bins)

    def empty(self) -> bool:
        return not self.syn


class ClassSampler:
    """Draws class batches without replacement, reshuffling when a class runs out."""

    def __init__(self, labels: np.ndarray, num_classes: int, rng: np.random.Generator):
        self.rng = rng
        self.pools = [np.flatnonzero(labels == c) for c in range(num_classes)]
        self.order = [rng.permutation(p) for p in self.pools]
        self.pos = [0] * num_classes

    def draw(self, c: int, n: int) -> np.ndarray:
        pool = self.pools[c]
        n = min(n, pool.size)
        if self.pos[c] + n > pool.size:
            self.order[c] = self.rng.permutation(pool)
            self.pos[c] = 0
        out = self.order[c][self.pos[c] : self.pos[c] + n]
        self.pos[c] += n
        return out


def init_synthetic(dataset: Dataset, ipc: int, mode: str, rng: np.random.Generator,
                   dtype=np.float32) -> SyntheticSet:
    """Real-image or standard-normal initialization, ipc images per class."""
    c, (h, w), ch = dataset.num_classes, dataset.im_size, dataset.channels
    labels = even_labels(c, ipc)
    if mode == "noise":
        images = rng.standard_normal((c * ipc, ch, h, w)).astype(dtype)
    elif mode == "real":
        images = np.empty((c * ipc, ch, h, w), dtype)
        for k, idx in enumerate(dataset.class_indices()):
            if idx.size < ipc:
                raise CondenseError(f"class {k} has {idx.size} images, fewer than ipc={ipc}")
            images[k * ipc : (k + 1) * ipc] = dataset.train_x[rng.choice(idx, ipc, replace=False)]
    else:
        raise CondenseError(f"unknown init mode {mode!r}")
    return SyntheticSet(images, labels, ipc, c, init=mode, mean=dataset.mean, std=dataset.std)


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "net", "sampler", "omega", "net_aug")
    return dict(zip(names, (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(names)))))


def _train_net_epoch(net, opt, images, labels, batch, dist, rng):
    order = rng.permutation(len(images))
    for s in range(0, len(images), batch):
        idx = order[s : s + batch]
        with no_grad():
            x = augment.augment_independent(Tensor(images[idx]), dist, rng)
        loss = F.softmax_cross_entropy(net.forward(x, first_order=True), labels[idx])
        opt.step(grad(loss, net.parameters()))


def condense(cfg: CondenseConfig, dataset: Dataset, diagnostics: GradDiagnostics | None = None,
             log=None, checkpoint=None) -> SyntheticSet:
    """Learns a synthetic set; the per-iteration loss trace is stored on the result.

    ``checkpoint(syn)`` is called after every ``cfg.checkpoint_every`` outer iterations.
    """
    cfg.validate()
    spec = dataclasses.replace(cfg.arch, channels=dataset.channels, im_size=dataset.im_size,
                               num_classes=dataset.num_classes)
    if dataset.train_y.max() >= dataset.num_classes or dataset.train_y.min() < 0:
        raise CondenseError(f"dataset labels fall outside [0, {dataset.num_classes})")
    rngs = _streams(cfg.seed)
    syn = init_synthetic(dataset, cfg.ipc, cfg.init, rngs["init"])
    syn.seed, syn.config = cfg.seed, cfg.snapshot()
    outer, net_steps = cfg.inner()
    sampler = ClassSampler(dataset.train_y, dataset.num_classes, rngs["sampler"])
    hw = dataset.im_size
    velocity = np.zeros_like(syn.images)
    no_aug = AugDistribution()
    syn_dist = cfg.aug if cfg.syn_aug != "none" else no_aug
    real_dist = cfg.aug if cfg.real_aug != "none" else no_aug
    diag_at = set(cfg.diag_iterations)
    for k in range(cfg.iterations):
        start = time.perf_counter()
        net = make_network(spec, rngs["net"])
        net_opt = SGD(net.parameters(), cfg.lr_net, cfg.momentum_net)
        losses = []
        for t in range(outer):
            for c in range(dataset.num_classes):
                sl = syn.class_slice(c)
                real_idx = sampler.draw(c, cfg.batch_real)
                real_x = dataset.train_x[real_idx]
                real_y = dataset.train_y[real_idx]
                syn_y = syn.labels[sl]
                omegas = [augment.sample_omega(syn_dist if cfg.syn_aug == "siamese" else real_dist, rngs["omega"], hw)
                          for _ in range(cfg.omegas_per_step)]
                real_sets = []
                for omega in omegas:
                    if cfg.real_aug == "independent":
                        with no_grad():
                            rx = augment.augment_independent(Tensor(real_x), real_dist, rngs["omega"]).data
                        r_omega = augment.IDENTITY
                    else:
                        rx, r_omega = real_x, omega if cfg.real_aug == "siamese" else augment.IDENTITY
                    real_sets.append(real_gradients(net, rx, real_y, r_omega, cfg.aug.ranges, cfg.include_norm))
                for _ in range(cfg.syn_steps):
                    s = Tensor(syn.images[sl], requires_grad=True)
                    # classes larger than the synthetic batch are subsampled
                    if cfg.ipc > cfg.batch_syn:
                        pick = np.sort(rngs["sampler"].choice(cfg.ipc, cfg.batch_syn, replace=False))
                        sb, sb_y = s[pick], syn_y[pick]
                    else:
                        sb, sb_y = s, syn_y
                    total = None
                    for omega, rg in zip(omegas, real_sets):
                        if cfg.syn_aug == "siamese":
                            x, s_omega = sb, omega
                        elif cfg.syn_aug == "independent":
                            x, s_omega = augment.augment_independent(sb, syn_dist, rngs["omega"]), augment.IDENTITY
                        else:
                            x, s_omega = sb, augment.IDENTITY
                        m = matching_loss(x, sb_y, real_x, real_y, net, s_omega, cfg.aug.ranges,
                                          cfg.include_norm, real_grads=rg)
                        total = m.value if total is None else total + m.value
                        if k in diag_at and diagnostics is not None:
                            _record(diagnostics, k, net, x, sb_y, s_omega, rg, cfg)
                    value = float(total.data)
                    losses.append(value)
                    if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
                        syn.trace.append(TraceEntry(k, value, time.perf_counter() - start))
                        raise DivergenceError(f"matching loss {value} at iteration {k}, step {t}, class {c}", syn.trace)
                    (g,) = grad(total, [s])
                    velocity[sl] = cfg.momentum_img * velocity[sl] + g.data
                    syn.images[sl] = syn.images[sl] - cfg.lr_img * velocity[sl]
            # the network update after the final inner step never influences S
            if t == outer - 1:
                break
            batch = min(cfg.batch_syn, len(syn.images))
            for _ in range(net_steps):
                _train_net_epoch(net, net_opt, syn.images, syn.labels, batch, syn_dist, rngs["net_aug"])
        entry = TraceEntry(k, float(np.mean(losses)), time.perf_counter() - start)
        syn.trace.append(entry)
        if log is not None:
            log(entry)
        if checkpoint is not None and cfg.checkpoint_every and (k + 1) % cfg.checkpoint_every == 0:
            checkpoint(syn)
    return syn


def _record(diag: GradDiagnostics, k, net, x, syn_y, s_omega, real_grads, cfg):
    from .matching import network_gradients

    with no_grad():
        xa = augment.apply(Tensor(x.data), s_omega, cfg.aug.ranges)
    sg = network_gradients(net, xa, syn_y, cfg.include_norm)
    diag.record(k, sg.norm(), real_grads.norm())


ABLATION_SCHEMES = {
    # scheme: (condense real, condense synthetic, test-time augmentation)
    "A": ("none", "none", False),
    "B": ("none", "none", True),
    "C": ("independent", "none", True),
    "D": ("none", "independent", True),
    "E": ("siamese", "siamese", False),
    "F": ("independent", "independent", True),
    "Ours": ("siamese", "siamese", True),
}


def ablation_scheme(scheme: str, base: CondenseConfig, eval_base):
    """Condensation and evaluation configs for one augmentation-placement scheme."""
    if scheme not in ABLATION_SCHEMES:
        raise CondenseError(f"unknown ablation scheme {scheme!r}; expected one of {sorted(ABLATION_SCHEMES)}")
    real, synth, test = ABLATION_SCHEMES[scheme]
    aug = base.aug
    if real == "none" and synth == "none":
        aug = AugDistribution(strategy="none", digits=base.aug.digits, ranges=base.aug.ranges)
    cfg = dataclasses.replace(base, real_aug=real, syn_aug=synth, aug=aug)
    test_aug = base.aug if test else AugDistribution(strategy="none", digits=base.aug.digits, ranges=base.aug.ranges)
    return cfg, dataclasses.replace(eval_base, aug=test_aug)


__all__ = [
    "ABLATION_SCHEMES",
    "ClassSampler",
    "CondenseConfig",
    "CondenseError",
    "DivergenceError",
    "GradDiagnostics",
    "TraceEntry",
    "ablation_scheme",
    "condense",
    "init_synthetic",
]
