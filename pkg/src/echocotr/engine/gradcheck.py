"""Central finite differences, the oracle for every backward rule."""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Union

import numpy as np

from .tensor import Tape, Tensor


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        return v.item()
    return float(np.asarray(v).reshape(()))


def finite_diff_grad(f: Callable[[], Union[Tensor, float]], x: Tensor, step: float = 1e-5,
                     coords: Optional[Iterable[int]] = None) -> np.ndarray:
    """Estimate d f / d x by (f(x+h e_i) - f(x-h e_i)) / 2h.

    ``f`` takes no arguments and reads ``x`` by reference; ``x.data`` is
    perturbed in place and restored. With ``coords`` only those flat indices are
    estimated and the others are left at zero.
    """
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = _scalar(f())
        flat[i] = orig - step
        fm = _scalar(f())
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * step)
    return grad.reshape(x.shape)


def analytic_grads(f: Callable[[], Tensor], wrt: list[Tensor]) -> list[np.ndarray]:
    """Run ``f`` under a fresh tape and return d f / d t for each t in ``wrt``."""
    for t in wrt:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = f()
    tape.backward(out)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a-b| / max(max|a|, max|b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def check_gradients(f: Callable[[], Tensor], wrt: list[Tensor], step: float = 1e-5) -> float:
    """Worst relative error between backward and finite differences over ``wrt``."""
    analytic = analytic_grads(f, wrt)
    worst = 0.0
    for t, ga in zip(wrt, analytic):
        gn = finite_diff_grad(f, t, step)
        worst = max(worst, relative_error(ga, gn))
    return worst
