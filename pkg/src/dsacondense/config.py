"""Experiment configuration files: INI sections layered with ``section.key=value`` overrides."""
from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugDistribution, AugRanges
from .condense import CondenseConfig
from .evaluate import EvalConfig
from .models import ArchError, ArchSpec

# input geometry per dataset, used to validate the [arch] block before data is loaded
GEOMETRY = {"mnist": (1, (28, 28)), "fashionmnist": (1, (28, 28)), "cifar10": (3, (32, 32)),
            "cifar100": (3, (32, 32)), "svhn": (3, (32, 32))}

NAS_PROXIES = ("random", "dsa", "early_stopping")
SECTIONS = ("experiment", "dataset", "arch", "aug", "condense", "eval", "crossarch", "nas")
_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


class ConfigError(ValueError):
    """Malformed, unknown or inconsistent configuration."""


@dataclass(frozen=True)
class DatasetConfig:
    name: str = "mnist"
    root: str | None = None
    train: int | None = None  # class-stratified training subset size
    test: int | None = None
    subset_seed: int = 0


@dataclass(frozen=True)
class ExperimentSection:
    output: str = "runs/default"
    seed: int = 0


@dataclass(frozen=True)
class AugSection:
    strategy: str = "combination"
    kind: str | None = None
    kinds: tuple[str, ...] = AugDistribution().kinds
    digits: bool | None = None  # inferred from the dataset name when unset


@dataclass(frozen=True)
class CrossArchSection:
    condense_archs: tuple[str, ...] = ("convnet", "mlp", "lenet")
    eval_archs: tuple[str, ...] = ("convnet", "mlp", "lenet")


@dataclass(frozen=True)
class NasSection:
    grid: str = "desk"
    train: int = 2000
    test: int = 1000
    proxy_ipc: int = 10
    proxy_epochs: int = 100
    condense_iterations: int = 60
    reference_epochs: int = 20
    fraction: float = 0.05
    proxies: tuple[str, ...] = ("random", "dsa", "early_stopping")


# Section name -> dataclass whose scalar fields it holds.
_SCHEMA = {
    "experiment": ExperimentSection,
    "dataset": DatasetConfig,
    "arch": ArchSpec,
    "aug": (AugSection, AugRanges),
    "condense": CondenseConfig,
    "eval": EvalConfig,
    "crossarch": CrossArchSection,
    "nas": NasSection,
}
_NESTED = {"arch", "aug"}  # fields filled from other sections


def _fields(section: str) -> dict[str, typing.Any]:
    classes = _SCHEMA[section]
    classes = classes if isinstance(classes, tuple) else (classes,)
    out = {}
    for cls in classes:
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            if f.name not in _NESTED and f.name != "ranges":
                out[f.name] = hints[f.name]
    return out


def _coerce(hint, raw: str, where: str):
    text = raw.strip()
    args = typing.get_args(hint)
    if type(None) in args:
        if text.lower() in ("", "none"):
            return None
        hint = next(a for a in args if a is not type(None))
        args = typing.get_args(hint)
    origin = typing.get_origin(hint)
    try:
        if origin is tuple:
            parts = [p.strip() for p in text.replace("x", ",").split(",")] if args[0] is int else \
                [p.strip() for p in text.split(",")]
            parts = [p for p in parts if p]
            item = args[0]
            values = tuple(_coerce(item, p, where) for p in parts)
            if Ellipsis not in args and len(values) != len(args):
                raise ConfigError(f"{where}: expected {len(args)} comma-separated values, got {raw!r}")
            return values
        if hint is bool:
            if text.lower() not in _BOOL:
                raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
            return _BOOL[text.lower()]
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        return text
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from exc


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    arch: ArchSpec = field(default_factory=ArchSpec)
    aug: AugDistribution = field(default_factory=AugDistribution)
    condense: CondenseConfig = field(default_factory=CondenseConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    crossarch: CrossArchSection = field(default_factory=CrossArchSection)
    nas: NasSection = field(default_factory=NasSection)

    @property
    def output(self) -> Path:
        return Path(self.experiment.output)

    def sections(self) -> dict[str, dict[str, str]]:
        """Fully resolved values as strings, one dict per section."""
        aug_section = AugSection(self.aug.strategy, self.aug.kind, self.aug.kinds, self.aug.digits)
        objects = {"experiment": [self.experiment], "dataset": [self.dataset], "arch": [self.arch],
                   "aug": [aug_section, self.aug.ranges], "condense": [self.condense], "eval": [self.eval],
                   "crossarch": [self.crossarch], "nas": [self.nas]}
        out = {}
        for name in SECTIONS:
            keys = _fields(name)
            values = {}
            for obj in objects[name]:
                for f in dataclasses.fields(obj):
                    if f.name in keys:
                        values[f.name] = _format(getattr(obj, f.name))
            out[name] = values
        t, n = self.condense.inner()
        out["condense"]["outer_steps"], out["condense"]["net_steps"] = str(t), str(n)
        out["eval"]["decay_epoch"] = str(self.eval.decay_epoch if self.eval.decay_epoch is not None
                                         else self.eval.epochs // 2)
        return out

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for name, values in self.sections().items():
            parser[name] = values
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini())
        return path


def _read(text: str, origin: str) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError(f"{origin}: {exc}") from exc
    return {s: dict(parser[s]) for s in parser.sections()}


def parse_overrides(pairs) -> dict[str, dict[str, str]]:
    """``section.key=value`` pairs into nested dicts."""
    out: dict[str, dict[str, str]] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form section.key=value")
        key, value = pair.split("=", 1)
        if "." not in key:
            raise ConfigError(f"override key {key!r} must be section.key")
        section, name = key.strip().split(".", 1)
        out.setdefault(section.lower(), {})[name.strip().lower()] = value
    return out


def build(raw: dict[str, dict[str, str]]) -> ExperimentConfig:
    """Typed configuration from raw section dicts; unknown sections or keys are rejected."""
    typed: dict[str, dict] = {}
    for section, values in raw.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]; expected one of {list(SECTIONS)}")
        known = _fields(section)
        typed[section] = {}
        for key, text in values.items():
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{section}]; expected one of {sorted(known)}")
            typed[section][key] = _coerce(known[key], text, f"[{section}] {key}")
    try:
        experiment = ExperimentSection(**typed.get("experiment", {}))
        dataset = DatasetConfig(**typed.get("dataset", {}))
        arch = ArchSpec(**typed.get("arch", {}))
        channels, im_size = GEOMETRY.get(dataset.name.lower().replace("-", "").replace("_", ""), (1, (28, 28)))
        dataclasses.replace(arch, channels=channels, im_size=im_size).validate()
        aug_kw = typed.get("aug", {})
        range_names = {f.name for f in dataclasses.fields(AugRanges)}
        ranges = AugRanges(**{k: v for k, v in aug_kw.items() if k in range_names})
        section = AugSection(**{k: v for k, v in aug_kw.items() if k not in range_names})
        digits = section.digits
        if digits is None:
            digits = AugDistribution.for_dataset(section.strategy, dataset.name).digits
        aug = AugDistribution(section.strategy, section.kind, digits, section.kinds, ranges)
        aug.validate()
        ckw = dict(typed.get("condense", {}))
        ckw.setdefault("seed", experiment.seed)
        condense = CondenseConfig(arch=arch, aug=aug, **ckw)
        condense.validate()
        ekw = dict(typed.get("eval", {}))
        ekw.setdefault("seed", experiment.seed)
        evalc = EvalConfig(arch=arch, aug=aug, **ekw)
        evalc.validate()
        cross = CrossArchSection(**typed.get("crossarch", {}))
        for label in cross.condense_archs + cross.eval_archs:
            arch_from_label(label, arch)
        nas = NasSection(**typed.get("nas", {}))
        if nas.grid not in ("desk", "full"):
            raise ConfigError(f"[nas] grid must be 'desk' or 'full', got {nas.grid!r}")
        unknown = set(nas.proxies) - set(NAS_PROXIES)
        if unknown or not nas.proxies:
            raise ConfigError(f"[nas] proxies must be a non-empty subset of {NAS_PROXIES}, got {nas.proxies!r}")
    except ConfigError:
        raise
    except (TypeError, ValueError, ArchError) as exc:
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(experiment, dataset, arch, aug, condense, evalc, cross, nas)


def load(path=None, overrides=()) -> ExperimentConfig:
    """Config file (optional) with command-line overrides layered on top."""
    raw: dict[str, dict[str, str]] = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        raw = _read(text, str(path))
    for section, values in parse_overrides(overrides).items():
        raw.setdefault(section, {}).update(values)
    return build(raw)


def arch_from_label(label: str, base: ArchSpec) -> ArchSpec:
    """``convnet`` (the [arch] block), ``mlp``, ``lenet`` or a full convnet label."""
    label = label.strip().lower()
    if label == "convnet":
        return base
    if label == "mlp":
        return ArchSpec.mlp()
    if label == "lenet":
        return ArchSpec.lenet()
    parts = label.split("-")
    if len(parts) == 6 and parts[0] == "convnet" and parts[1][:1] == "d" and parts[2][:1] == "w":
        try:
            return dataclasses.replace(base, depth=int(parts[1][1:]), width=int(parts[2][1:]), activation=parts[3],
                                       normalization=parts[4], pooling=parts[5])
        except ValueError:
            pass
    raise ConfigError(f"unrecognized architecture label {label!r}")


__all__ = [
    "ConfigError",
    "DatasetConfig",
    "ExperimentConfig",
    "NasSection",
    "arch_from_label",
    "build",
    "load",
    "parse_overrides",
]
