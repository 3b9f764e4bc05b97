"""Re-executable graphs over named leaves.

``Graph`` wraps a Python function of named input tensors.  Each call to
``forward`` re-binds the leaves, re-runs the function and records the
topologically ordered operator nodes, which makes the graph object usable
for repeated evaluation (finite-difference checks, determinism tests).
"""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import ShapeError, Tensor, _topo_order, grad


class Graph:
    def __init__(self, fn: Callable[..., Tensor], leaves: Mapping[str, np.ndarray | Tensor], requires_grad=True):
        self.fn = fn
        self.leaves: dict[str, Tensor] = {}
        for name, value in leaves.items():
            t = Tensor(value, requires_grad=requires_grad, name=name)
            self.leaves[name] = t
        self.root: Tensor | None = None
        self.nodes: list[Tensor] = []

    def bind(self, **values) -> None:
        for name, value in values.items():
            if name not in self.leaves:
                raise KeyError(f"unknown leaf {name!r}; graph leaves are {sorted(self.leaves)}")
            leaf = self.leaves[name]
            arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype=leaf.dtype)
            if arr.shape != leaf.shape:
                raise ShapeError(f"leaf {name!r}: expected shape {leaf.shape}, got {arr.shape}")
            leaf.data = arr.copy()

    def forward(self, **values) -> Tensor:
        self.bind(**values)
        self.root = self.fn(**self.leaves)
        self.nodes = _topo_order(self.root) if self.root.requires_grad else []
        return self.root

    def gradient(self, wrt=None) -> dict[str, Tensor]:
        if self.root is None:
            self.forward()
        names = list(self.leaves) if wrt is None else list(wrt)
        grads = grad(self.root, [self.leaves[n] for n in names])
        return dict(zip(names, grads))


def forward(graph: Graph, leaf_values: Mapping[str, np.ndarray] | None = None) -> Tensor:
    return graph.forward(**(leaf_values or {}))


def gradient(graph: Graph, wrt=None) -> dict[str, Tensor]:
    return graph.gradient(wrt)


def gradient_of_gradient_objective(
    graph: Graph,
    objective: Callable[[list[Tensor]], Tensor],
    theta: list[str],
    wrt: list[str],
) -> dict[str, Tensor]:
    """d objective(grad_theta root) / d wrt, by double backprop.

    ``objective`` maps the list of gradients with respect to the ``theta``
    leaves to a scalar tensor.
    """
    root = graph.forward() if graph.root is None else graph.root
    gtheta = grad(root, [graph.leaves[n] for n in theta], create_graph=True)
    value = objective(gtheta)
    if not isinstance(value, Tensor):
        value = Tensor(value)
    grads = grad(value, [graph.leaves[n] for n in wrt])
    return dict(zip(wrt, grads))
