"""Differentiable primitives on :class:`~lavit.tensor.Tensor`.

Every function computes its forward value with numpy and, when a recording tape
is active and an input is tracked, pushes a backward closure. Multiply-add
operations report ``2·m·k·n``-style counts to the tape's meter; softmax, layer
norm and GELU report per-element costs from :data:`NONLINEAR_COST`.
Elementwise adds and scalings are not metered.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from lavit.tensor import ShapeError, Tensor, active_tape, as_tensor

# per-element operation counts for the "nonlinear" meter column
NONLINEAR_COST = {
    "softmax": 5,  # max, subtract, exp, sum, divide
    "layer_norm": 7,  # mean, subtract, square, sum, scale by rsqrt, affine mul+add
    "gelu": 8,
}

LN_EPS = 1e-6


def _emit(out: np.ndarray, inputs: tuple[Tensor, ...], backward, op: str,
          flops: int = 0, nonlinear: int = 0) -> Tensor:
    result = Tensor._wrap(out)
    tape = active_tape()
    if tape is None:
        return result
    if tape.meter is not None and (flops or nonlinear):
        tape.meter.add(op, flops=flops, nonlinear=nonlinear)
    if tape.record and any(tape.is_tracked(t) for t in inputs):
        tape.push(result, inputs, backward, op)
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting; ``b`` may be a python float."""
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        c = float(b)
        return _emit(a.data * c, (a,), lambda g: (g * c,), "scale")
    b = as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit(out, (a, b), backward, "mul")


def absolute(a) -> Tensor:
    """|a| with subgradient 0 at 0."""
    a = as_tensor(a)
    return _emit(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def gelu(x) -> Tensor:
    """Exact (erf) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    out = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data**2) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x.data * pdf),)

    return _emit(out, (x,), backward, "gelu", nonlinear=NONLINEAR_COST["gelu"] * x.size)


# ----------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ------------------------------------------------------------------- layout


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _emit(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "permute")


def transpose_last2(a) -> Tensor:
    """Swap the last two axes: ``out[..., j, i] = a[..., i, j]``."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose_last2 needs rank >= 2, got shape {list(a.shape)}")
    out = np.swapaxes(a.data, -1, -2)
    return _emit(out, (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def concat(tensors, axis: int) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(out, tensors, backward, "concat")


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros(a.shape)
        full[index] = g
        return (full,)

    return _emit(a.data[index], (a,), backward, "slice")


# ------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product ``[..., m, k] @ [..., k, n]`` with broadcasting.

    Meters ``2·m·k·n`` FLOPs per broadcast batch element.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {list(a.shape)} @ {list(b.shape)}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(out, (a, b), backward, "matmul", flops=2 * out.size * a.shape[-1])


def linear_rowwise(x, w, b=None) -> Tensor:
    """Map every row ``r`` of ``x`` to ``r @ w + b``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear shape mismatch: input {list(x.shape)}, weight {list(w.shape)}")
    y = matmul(x, w)
    if b is None:
        return y
    b = as_tensor(b)
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear bias shape {list(b.shape)} does not match weight {list(w.shape)}")
    return add(y, b)


def softmax_rows(a) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] < 1:
        raise ShapeError("softmax_rows needs a non-empty last axis")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit(s, (a,), backward, "softmax", nonlinear=NONLINEAR_COST["softmax"] * a.size)


def layer_norm(x, gamma=None, beta=None, eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then apply the affine.

    ``gamma``/``beta`` may be omitted for a plain standardization.
    """
    x = as_tensor(x)
    d = x.shape[-1]
    gamma = None if gamma is None else as_tensor(gamma)
    beta = None if beta is None else as_tensor(beta)
    for p in (gamma, beta):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layer_norm affine shape {list(p.shape)} != [{d}]")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    inputs = tuple(t for t in (x, gamma, beta) if t is not None)

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gx_hat = g * gamma.data if gamma is not None else g
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return _emit(out, inputs, backward, "layer_norm",
                 nonlinear=NONLINEAR_COST["layer_norm"] * x.size)


# -------------------------------------------------------------- convolutions


def dwconv_square(a, kernels, r: int) -> Tensor:
    """Depthwise convolution with kernel size = stride = ``r`` and no padding.

    ``a`` is ``[..., C, s, s]``, ``kernels`` is ``[C, r, r]``; the result is
    ``[..., C, s/r, s/r]`` with ``out[c,i,j] = Σ_uv k[c,u,v]·a[c, i·r+u, j·r+v]``.
    """
    a, kernels = as_tensor(a), as_tensor(kernels)
    if a.ndim < 3 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"dwconv_square expects [..., C, s, s], got {list(a.shape)}")
    *lead, c, s, _ = a.shape
    if s % r != 0:
        raise ShapeError(f"dwconv_square: side {s} not divisible by rate {r}")
    if kernels.shape != (c, r, r):
        raise ShapeError(f"dwconv_square: kernels {list(kernels.shape)} != [{c}, {r}, {r}]")
    q = s // r
    blocks = a.data.reshape(*lead, c, q, r, q, r)
    out = np.einsum("...cuivj,cij->...cuv", blocks, kernels.data)

    def backward(g):
        ga = np.einsum("...cuv,cij->...cuivj", g, kernels.data).reshape(a.shape)
        gk = np.einsum("bcuivj,bcuv->cij", blocks.reshape(-1, c, q, r, q, r), g.reshape(-1, c, q, q))
        return ga, gk

    batch = int(np.prod(lead)) if lead else 1
    return _emit(out, (a, kernels), backward, "dwconv", flops=2 * batch * c * q * q * r * r)


def conv1x1_channels(a, w, b=None) -> Tensor:
    """Pointwise channel mix: ``out[o,i,j] = b[o] + Σ_c w[o,c]·a[c,i,j]``."""
    a, w = as_tensor(a), as_tensor(w)
    if a.ndim < 3 or w.ndim != 2 or w.shape[1] != a.shape[-3]:
        raise ShapeError(f"conv1x1 shape mismatch: input {list(a.shape)}, weight {list(w.shape)}")
    out = np.einsum("oc,...chw->...ohw", w.data, a.data)
    inputs = (a, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv1x1 bias {list(b.shape)} != [{w.shape[0]}]")
        out = out + b.data[:, None, None]
        inputs = (a, w, b)
    lead_axes = tuple(range(a.ndim - 3))

    def backward(g):
        ga = np.einsum("oc,...ohw->...chw", w.data, g)
        gw = np.einsum("bohw,bchw->oc", g.reshape(-1, *g.shape[-3:]), a.data.reshape(-1, *a.shape[-3:]))
        if b is None:
            return ga, gw
        return ga, gw, g.sum(axis=lead_axes + (-2, -1))

    flops = 2 * w.shape[0] * a.size
    return _emit(out, inputs, backward, "conv1x1", flops=flops)


# -------------------------------------------------------------------- losses


def cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]`` (log-space)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B, K] logits, got {list(logits.shape)}")
    bsz, k = logits.shape
    if k < 2:
        raise ShapeError("cross_entropy needs at least 2 classes")
    if labels.shape != (bsz,):
        raise ShapeError(f"labels shape {list(labels.shape)} != [{bsz}]")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(bsz)
    out = np.asarray(-logp[rows, labels].mean())

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / bsz,)

    return _emit(out, (logits,), backward, "cross_entropy")
