"""ConvNet family plus MLP and LeNet-style baselines, with Kaiming initialization."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, functional as F
from .autodiff import fused

ACTIVATIONS = ("relu", "leakyrelu", "sigmoid")
NORMALIZATIONS = ("instance", "batch", "layer", "group", "none")
POOLINGS = ("avg", "max", "none")
FAMILIES = ("convnet", "mlp", "lenet")
GROUP_NORM_GROUPS = 4


class ArchError(ValueError):
    """Invalid architecture description (unknown option or spatial collapse)."""


@dataclass(frozen=True)
class ArchSpec:
    family: str = "convnet"
    depth: int = 3
    width: int = 128
    activation: str = "relu"
    normalization: str = "instance"
    pooling: str = "avg"
    channels: int = 1
    im_size: tuple[int, int] = (28, 28)
    num_classes: int = 10

    @classmethod
    def mlp(cls, **kw) -> "ArchSpec":
        kw.setdefault("normalization", "none")
        kw.setdefault("pooling", "none")
        kw.setdefault("width", 128)
        return cls(family="mlp", **kw)

    @classmethod
    def lenet(cls, **kw) -> "ArchSpec":
        kw.setdefault("normalization", "none")
        kw.setdefault("pooling", "max")
        return cls(family="lenet", **kw)

    @property
    def label(self) -> str:
        if self.family != "convnet":
            return self.family
        return f"convnet-d{self.depth}-w{self.width}-{self.activation}-{self.normalization}-{self.pooling}"

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ArchError(f"unknown family {self.family!r}")
        if self.activation not in ACTIVATIONS:
            raise ArchError(f"unknown activation {self.activation!r}")
        if self.normalization not in NORMALIZATIONS:
            raise ArchError(f"unknown normalization {self.normalization!r}")
        if self.pooling not in POOLINGS:
            raise ArchError(f"unknown pooling {self.pooling!r}")
        if self.depth < 1 or self.width < 1:
            raise ArchError(f"depth and width must be positive, got {self.depth}, {self.width}")
        if self.normalization == "group" and self.width % GROUP_NORM_GROUPS:
            raise ArchError(f"group norm needs width divisible by {GROUP_NORM_GROUPS}, got {self.width}")
        if self.family == "convnet":
            self.feature_size()

    def feature_size(self) -> tuple[int, int]:
        """Spatial size after the ConvNet blocks.

        A pooled map must stay at least 2x2; pooling down to 1x1 or below
        counts as collapse.
        """
        h, w = self.im_size
        for block in range(self.depth):
            if self.pooling != "none":
                h, w = h // 2, w // 2
                if h < 2 or w < 2:
                    raise ArchError(
                        f"spatial collapse: {self.im_size} input pooled to {h}x{w} at block {block + 1} of {self.depth}"
                    )
        return h, w

    def to_config(self) -> dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = "x".join(map(str, v)) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_config(cls, cfg) -> "ArchSpec":
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name not in cfg:
                continue
            raw = cfg[f.name]
            if f.name == "im_size":
                kw[f.name] = tuple(int(v) for v in str(raw).lower().split("x"))
            elif f.name in ("depth", "width", "channels", "num_classes"):
                kw[f.name] = int(raw)
            else:
                kw[f.name] = str(raw)
        unknown = set(cfg) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ArchError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**kw)


# ----------------------------------------------------------------------
# layers
# ----------------------------------------------------------------------

class Conv:
    kind = "conv"

    def __init__(self, cin, cout, k, padding, dtype):
        self.padding = padding
        self.weight = Tensor(np.zeros((cout, cin, k, k), dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype), requires_grad=True)

    def params(self):
        return [self.weight, self.bias]

    def __call__(self, x, training):
        return F.conv2d(x, self.weight, self.bias, padding=self.padding)


class Linear:
    kind = "linear"

    def __init__(self, cin, cout, dtype):
        self.weight = Tensor(np.zeros((cout, cin), dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype), requires_grad=True)

    def params(self):
        return [self.weight, self.bias]

    def __call__(self, x, training):
        if x.ndim > 2:
            x = F.flatten(x)
        return F.linear(x, self.weight, self.bias)


class Norm:
    kind = "norm"

    def __init__(self, mode, channels, dtype):
        self.mode = mode
        self.weight = Tensor(np.ones(channels, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype), requires_grad=True)
        if mode == "batch":
            self.running_mean = np.zeros(channels, np.float64)
            self.running_var = np.ones(channels, np.float64)

    def params(self):
        return [self.weight, self.bias]

    def __call__(self, x, training):
        if self.mode == "instance":
            return F.instance_norm(x, self.weight, self.bias)
        if self.mode == "layer":
            return F.layer_norm(x, self.weight, self.bias)
        if self.mode == "group":
            return F.group_norm(x, GROUP_NORM_GROUPS, self.weight, self.bias)
        return F.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var, training=training)


class Act:
    kind = "act"

    def __init__(self, mode):
        self.mode = mode

    def params(self):
        return []

    def __call__(self, x, training):
        if self.mode == "relu":
            return F.relu(x)
        if self.mode == "leakyrelu":
            return F.leaky_relu(x, 0.01)
        return F.sigmoid(x)


class Pool:
    kind = "pool"

    def __init__(self, mode):
        self.mode = mode

    def params(self):
        return []

    def __call__(self, x, training):
        return F.avg_pool2d(x, 2) if self.mode == "avg" else F.max_pool2d(x, 2)


@dataclass
class Network:
    spec: ArchSpec
    layers: list = field(default_factory=list)
    training: bool = True

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor, first_order: bool = False) -> Tensor:
        """Logits for an NCHW batch.

        ``first_order=True`` selects the fused channels-last kernels when the
        architecture allows it; the result then supports plain gradients only.
        """
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.dtype)
        expected = (self.spec.channels, *self.spec.im_size)
        if tuple(x.shape[1:]) != expected:
            raise ArchError(f"{self.spec.label} expects inputs of shape (N, {expected}), got {x.shape}")
        if first_order and self.fusable:
            return self._forward_fused(x)
        for layer in self.layers:
            x = layer(x, self.training)
        return x

    @property
    def fusable(self) -> bool:
        return self.spec.family == "convnet" and self.spec.normalization != "batch"

    def _forward_fused(self, x: Tensor) -> Tensor:
        h = x.transpose(0, 2, 3, 1)
        i = 0
        while self.layers[i].kind == "conv":
            conv = self.layers[i]
            i += 1
            norm = act = pool = None
            while self.layers[i].kind in ("norm", "act", "pool"):
                layer = self.layers[i]
                norm, act, pool = (layer if layer.kind == k else v
                                   for k, v in (("norm", norm), ("act", act), ("pool", pool)))
                i += 1
            z = fused.ConvNHWC.apply(h, conv.weight, padding=conv.padding)
            c = conv.weight.shape[0]
            groups = 0 if norm is None else {"instance": c, "layer": 1, "group": GROUP_NORM_GROUPS}[norm.mode]
            gamma = norm.weight if norm is not None else Tensor(np.ones(c, self.dtype))
            beta = norm.bias if norm is not None else Tensor(np.zeros(c, self.dtype))
            h = fused.PostConv.apply(z, conv.bias, gamma, beta, groups=groups, act=act.mode,
                                     pool="none" if pool is None else pool.mode, eps=F.DEFAULT_EPS)
        x = h.transpose(0, 3, 1, 2)
        for layer in self.layers[i:]:
            x = layer(x, self.training)
        return x

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]

    def weight_layers(self, include_norm: bool = False) -> list:
        kinds = ("conv", "linear", "norm") if include_norm else ("conv", "linear")
        return [layer for layer in self.layers if layer.kind in kinds]

    def matching_params(self, include_norm: bool = False) -> list[Tensor]:
        """Weight tensors whose per-node gradients enter the matching distance."""
        return [layer.weight for layer in self.weight_layers(include_norm)]

    def train(self, flag: bool = True) -> "Network":
        self.training = flag
        return self

    def eval(self) -> "Network":
        return self.train(False)

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, arrays) -> None:
        for p, a in zip(self.parameters(), arrays):
            p.data = np.array(a, dtype=p.dtype)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def build(spec: ArchSpec, dtype=np.float32) -> Network:
    """Constructs (zero-initialized) layers for ``spec``; call ``kaiming_init`` next."""
    spec.validate()
    ch, (h, w) = spec.channels, spec.im_size
    layers: list = []
    if spec.family == "convnet":
        c = ch
        for _ in range(spec.depth):
            layers.append(Conv(c, spec.width, 3, 1, dtype))
            if spec.normalization != "none":
                layers.append(Norm(spec.normalization, spec.width, dtype))
            layers.append(Act(spec.activation))
            if spec.pooling != "none":
                layers.append(Pool(spec.pooling))
            c = spec.width
        fh, fw = spec.feature_size()
        layers.append(Linear(c * fh * fw, spec.num_classes, dtype))
    elif spec.family == "mlp":
        dims = [ch * h * w, spec.width, spec.width]
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [Linear(a, b, dtype), Act(spec.activation)]
        layers.append(Linear(dims[-1], spec.num_classes, dtype))
    else:
        pad = 2 if h == 28 else 0
        layers += [Conv(ch, 6, 5, pad, dtype), Act(spec.activation)]
        if spec.pooling != "none":
            layers.append(Pool(spec.pooling))
        layers += [Conv(6, 16, 5, 0, dtype), Act(spec.activation)]
        if spec.pooling != "none":
            layers.append(Pool(spec.pooling))
        s = h + 2 * pad - 4
        s = s // 2 if spec.pooling != "none" else s
        s -= 4
        s = s // 2 if spec.pooling != "none" else s
        if s < 1:
            raise ArchError(f"spatial collapse: LeNet on {spec.im_size}")
        layers += [Linear(16 * s * s, 120, dtype), Act(spec.activation),
                   Linear(120, 84, dtype), Act(spec.activation),
                   Linear(84, spec.num_classes, dtype)]
    return Network(spec, layers)


def kaiming_init(net: Network, rng: np.random.Generator) -> Network:
    """Weights ~ N(0, 2/fan_in), biases zero, norm affine (1, 0); in place."""
    for layer in net.layers:
        if layer.kind in ("conv", "linear"):
            shape = layer.weight.shape
            fan_in = int(np.prod(shape[1:]))
            layer.weight.data = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(layer.weight.dtype)
            layer.bias.data = np.zeros_like(layer.bias.data)
        elif layer.kind == "norm":
            layer.weight.data = np.ones_like(layer.weight.data)
            layer.bias.data = np.zeros_like(layer.bias.data)
            if layer.mode == "batch":
                layer.running_mean[:] = 0.0
                layer.running_var[:] = 1.0
    return net


def make_network(spec: ArchSpec, rng: np.random.Generator, dtype=np.float32) -> Network:
    return kaiming_init(build(spec, dtype), rng)


@dataclass
class GradSet:
    """Per-layer matrices whose rows are per-output-node weight gradients."""

    layers: list  # list[Tensor], each (nodes, fan_in)

    @property
    def node_counts(self) -> list[int]:
        return [g.shape[0] for g in self.layers]

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(np.square(g.data, dtype=np.float64))) for g in self.layers)))


def per_node_grad_groups(net: Network, grads, include_norm: bool = False) -> GradSet:
    """Groups weight gradients into per-output-node rows.

    ``grads`` is a list aligned with ``net.matching_params(include_norm)`` or a
    dict keyed by the weight tensors' ids.  Biases are not part of the set.
    """
    params = net.matching_params(include_norm)
    if isinstance(grads, dict):
        missing = [i for i, p in enumerate(params) if id(p) not in grads]
        if missing:
            raise KeyError(f"missing gradient for weight layer(s) {missing}")
        grads = [grads[id(p)] for p in params]
    if len(grads) != len(params):
        raise KeyError(f"expected {len(params)} weight gradients, got {len(grads)}")
    rows = []
    for p, g in zip(params, grads):
        g = g if isinstance(g, Tensor) else Tensor(g)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match weight {p.shape}")
        rows.append(g.reshape(p.shape[0], -1))
    return GradSet(rows)


class SGD:
    """Momentum SGD over a list of tensors (updates ``.data``)."""

    def __init__(self, params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads) -> None:
        for i, (p, g) in enumerate(zip(self.params, grads)):
            g = g.data if isinstance(g, Tensor) else g
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                self.velocity[i] = self.momentum * self.velocity[i] + g
                g = self.velocity[i]
            p.data = (p.data - self.lr * g).astype(p.dtype)
