"""Central-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from lavit.tensor import ShapeError, Tape, Tensor, no_grad


def _scalar(out: Tensor) -> float:
    if out.size != 1:
        raise ShapeError(f"gradient_check needs a scalar-valued function, got shape {list(out.shape)}")
    return float(out.data.reshape(-1)[0])


def gradient_check(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor],
                   step: float = 1e-5, zero_tol: float = 1e-9) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps the input tensor(s) to a scalar tensor. Per coordinate the error is
    ``|analytic - central| / max(|analytic|, |central|)``. Coordinates where both
    values are below ``zero_tol`` count as agreeing: that is a structurally zero
    gradient (e.g. a bias that shifts a softmax row) seen through roundoff noise.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    leaves = [Tensor(t.data, requires_grad=True) for t in xs]
    with Tape() as tape:
        out = f(*leaves)
    _scalar(out)
    analytic = tape.gradient(out, leaves)

    worst = 0.0
    for i, leaf in enumerate(leaves):
        base = leaf.data.copy()
        flat = base.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            plus = _eval(f, leaves, i, base)
            flat[j] = orig - step
            minus = _eval(f, leaves, i, base)
            flat[j] = orig
            central = (plus - minus) / (2.0 * step)
            a = analytic[i].reshape(-1)[j]
            scale = max(abs(a), abs(central))
            err = 0.0 if scale < zero_tol else abs(a - central) / scale
            worst = max(worst, err)
    return worst


def _eval(f, leaves, i, perturbed) -> float:
    args = list(leaves)
    args[i] = Tensor(perturbed)
    with no_grad():
        return _scalar(f(*args))


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray,
                       step: float = 1e-5) -> np.ndarray:
    """Numerical gradient of a plain numpy scalar function."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        plus = f(x)
        flat[j] = orig - step
        minus = f(x)
        flat[j] = orig
        gflat[j] = (plus - minus) / (2.0 * step)
    return grad
