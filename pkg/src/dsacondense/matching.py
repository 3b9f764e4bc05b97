"""Gradient-matching distance and the augmented matching loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import augment
from .augment import AugParam, AugRanges
from .autodiff import Tensor, functional as F, grad, maximum
from .models import GradSet, Network, per_node_grad_groups

COSINE_EPS = 1e-6


class MatchingError(ValueError):
    """Structurally incompatible gradient sets or mixed-class batches."""


@dataclass
class MatchingLoss:
    value: Tensor
    per_layer: list[float]

    @property
    def total(self) -> float:
        return float(self.value.data)


def layer_gradient_distance(ga: GradSet, gb: GradSet, eps: float = COSINE_EPS) -> MatchingLoss:
    """Sum over layers and output nodes of one minus the cosine similarity.

    A node whose norm product falls below ``eps`` contributes 1.
    """
    if len(ga.layers) != len(gb.layers):
        raise MatchingError(f"layer count mismatch: {len(ga.layers)} vs {len(gb.layers)}")
    total = None
    per_layer = []
    for i, (a, b) in enumerate(zip(ga.layers, gb.layers)):
        if a.shape != b.shape:
            raise MatchingError(f"layer {i}: shape mismatch {a.shape} vs {b.shape}")
        dot = (a * b).sum(axis=1)
        norms = ((a * a).sum(axis=1) * (b * b).sum(axis=1)).sqrt()
        d = (1.0 - dot / maximum(norms, eps)).sum()
        per_layer.append(float(d.data))
        total = d if total is None else total + d
    if total is None:
        raise MatchingError("gradient sets have no layers")
    return MatchingLoss(total, per_layer)


def _single_class(labels, name) -> int:
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size != 1:
        raise MatchingError(f"{name} batch must hold a single class, got classes {classes.tolist()}")
    return int(classes[0])


def network_gradients(net: Network, images: Tensor, labels, include_norm: bool = False,
                      create_graph: bool = False) -> GradSet:
    """Per-node weight gradients of the mean cross-entropy on one batch."""
    params = net.matching_params(include_norm)
    loss = F.softmax_cross_entropy(net.forward(images, first_order=not create_graph), labels)
    return per_node_grad_groups(net, grad(loss, params, create_graph=create_graph), include_norm)


def real_gradients(net: Network, images, labels, omega: AugParam = augment.IDENTITY,
                   ranges: AugRanges = AugRanges(), include_norm: bool = False) -> GradSet:
    """Gradients on a real batch; constants with respect to the synthetic pixels."""
    x = augment.apply(Tensor(images, dtype=net.dtype), omega, ranges)
    return network_gradients(net, x, labels, include_norm, create_graph=False)


def matching_loss(syn: Tensor, syn_labels, real_images, real_labels, net: Network,
                  omega: AugParam = augment.IDENTITY, ranges: AugRanges = AugRanges(),
                  include_norm: bool = False, real_omega: AugParam | None = None,
                  real_grads: GradSet | None = None) -> MatchingLoss:
    """Distance between real and synthetic weight gradients under a shared transform.

    ``syn`` should require grad; the result is differentiable with respect to
    it.  ``real_omega`` overrides the transform on the real side (used by the
    non-Siamese ablations); ``real_grads`` reuses a precomputed real branch.
    """
    c_syn = _single_class(syn_labels, "synthetic")
    c_real = _single_class(real_labels, "real")
    if c_syn != c_real:
        raise MatchingError(f"synthetic class {c_syn} does not match real class {c_real}")
    if tuple(np.shape(real_images)[1:]) != tuple(syn.shape[1:]):
        raise MatchingError(f"real batch {np.shape(real_images)} and synthetic batch {syn.shape} differ in (C, H, W)")
    if real_grads is None:
        r_omega = omega if real_omega is None else real_omega
        real_grads = real_gradients(net, real_images, real_labels, r_omega, ranges, include_norm)
    syn_grads = network_gradients(net, augment.apply(syn, omega, ranges), syn_labels, include_norm, create_graph=True)
    return layer_gradient_distance(syn_grads, real_grads)


def multi_omega_loss(syn: Tensor, syn_labels, real_images, real_labels, net: Network,
                     omegas: Sequence[AugParam], ranges: AugRanges = AugRanges(),
                     include_norm: bool = False) -> MatchingLoss:
    """Sum of matching losses over a fixed list of transforms."""
    total, per_layer = None, None
    for omega in omegas:
        m = matching_loss(syn, syn_labels, real_images, real_labels, net, omega, ranges, include_norm)
        total = m.value if total is None else total + m.value
        per_layer = m.per_layer if per_layer is None else [a + b for a, b in zip(per_layer, m.per_layer)]
    if total is None:
        raise MatchingError("empty transform list")
    return MatchingLoss(total, per_layer)


__all__ = [
    "COSINE_EPS",
    "MatchingError",
    "MatchingLoss",
    "layer_gradient_distance",
    "matching_loss",
    "multi_omega_loss",
    "network_gradients",
    "real_gradients",
]
