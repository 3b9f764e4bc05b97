"""Central finite-difference checks for the autodiff engine."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, grad, no_grad


def numerical_grad(f: Callable[..., float], arrays: Sequence[np.ndarray], index: int, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f(*arrays)`` with respect to ``arrays[index]``."""
    base = [np.array(a, dtype=np.float64, copy=True) for a in arrays]
    x = base[index]
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(*base))
        flat[i] = orig - h
        fm = float(f(*base))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


def check_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-5) -> list[float]:
    """Relative error of reverse-mode vs finite-difference gradients for each input."""
    tensors = [Tensor(np.asarray(a, np.float64), requires_grad=True) for a in arrays]
    analytic = grad(fn(*tensors), tensors)

    def scalar(*xs):
        with no_grad():
            return fn(*[Tensor(x) for x in xs]).item()

    return [
        relative_error(analytic[i].data, numerical_grad(scalar, arrays, i, h))
        for i in range(len(arrays))
    ]


def check_directional(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], index: int,
                      direction: np.ndarray, h: float = 1e-5) -> float:
    """Relative error of a directional derivative (grad . v) against central differences."""
    tensors = [Tensor(np.asarray(a, np.float64), requires_grad=(i == index)) for i, a in enumerate(arrays)]
    g = grad(fn(*tensors), tensors[index]).data
    analytic = float(np.sum(g * direction))

    def at(step):
        xs = [np.asarray(a, np.float64) for a in arrays]
        xs[index] = xs[index] + step * direction
        with no_grad():
            return fn(*[Tensor(x) for x in xs]).item()

    numeric = (at(h) - at(-h)) / (2 * h)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
