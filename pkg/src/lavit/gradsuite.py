"""Named gradient checks for every differentiable operation.

Each check reduces an op's output to a scalar through a fixed random weighting
so that every output coordinate contributes to the gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from lavit import ops
from lavit.attention import block_forward, la_transform
from lavit.config import preset
from lavit.gradcheck import gradient_check
from lavit.losses import cross_entropy, dp_loss, total_loss
from lavit.model import LaViTModel, ParameterStore, build, forward
from lavit.residual import downsample_attention
from lavit.tensor import Tensor

OP_TOL = 1e-5
MODEL_TOL = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    module: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error < self.tol


def _weighted(rng: np.random.Generator, out: Tensor) -> Tensor:
    w = rng.standard_normal(out.shape)
    return ops.sum(ops.mul(out, w))


def _rand(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(scale * rng.standard_normal(shape))


def _scalar_of(fn: Callable, wseed: int) -> Callable:
    def f(*xs):
        return _weighted(np.random.default_rng(wseed), fn(*xs))
    return f


def _block_params(rng, d: int, kind: str, hidden: int) -> dict[str, Tensor]:
    names = {"ln1_g": (d,), "ln1_b": (d,), "wv": (d, d), "bv": (d,), "wo": (d, d), "bo": (d,),
             "ln2_g": (d,), "ln2_b": (d,), "w1": (d, hidden), "b1": (hidden,),
             "w2": (hidden, d), "b2": (d,)}
    if kind == "VA":
        names.update({"wq": (d, d), "bq": (d,), "wk": (d, d), "bk": (d,)})
    return {k: _rand(rng, *s, scale=0.5) for k, s in names.items()}


def _checks(seed: int):
    """Yield ``(name, module, tol, thunk)``; thunks run the check lazily."""
    rng = np.random.default_rng(seed)
    ws = int(rng.integers(1 << 31))

    a, b = _rand(rng, 3, 4), _rand(rng, 4, 5)
    yield "matmul", "tensor-core", OP_TOL, lambda: gradient_check(_scalar_of(ops.matmul, ws), [a, b])
    s = _rand(rng, 2, 4, 4)
    yield "softmax", "tensor-core", OP_TOL, lambda: gradient_check(_scalar_of(ops.softmax_rows, ws), s)
    x, w, bias = _rand(rng, 2, 3, 4), _rand(rng, 4, 5), _rand(rng, 5)
    yield "linear", "tensor-core", OP_TOL, lambda: gradient_check(_scalar_of(ops.linear_rowwise, ws), [x, w, bias])
    g, bt = _rand(rng, 4), _rand(rng, 4)
    x2 = _rand(rng, 3, 4)
    yield "layer_norm", "tensor-core", OP_TOL, lambda: gradient_check(_scalar_of(ops.layer_norm, ws), [x2, g, bt])
    xg = _rand(rng, 3, 5)
    yield "gelu", "tensor-core", OP_TOL, lambda: gradient_check(_scalar_of(ops.gelu, ws), xg)
    am, k = _rand(rng, 2, 3, 4, 4), _rand(rng, 3, 2, 2)
    yield "dwconv", "tensor-core", OP_TOL, lambda: gradient_check(
        _scalar_of(lambda t, kk: ops.dwconv_square(t, kk, 2), ws), [am, k])
    ac, wc, bc = _rand(rng, 2, 3, 2, 2), _rand(rng, 4, 3), _rand(rng, 4)
    yield "conv1x1", "tensor-core", OP_TOL, lambda: gradient_check(
        _scalar_of(ops.conv1x1_channels, ws), [ac, wc, bc])

    la_in = [_rand(rng, 2, 4, 4), _rand(rng, 4, 4), _rand(rng, 4), _rand(rng, 4, 4), _rand(rng, 4)]

    def la(a_, tw, tb, pw, pb):
        return la_transform(a_, {"theta_w": tw, "theta_b": tb, "psi_w": pw, "psi_b": pb})
    yield "la_transform", "attention-layers", OP_TOL, lambda: gradient_check(_scalar_of(la, ws), la_in)

    d, n, h = 4, 3, 2
    va_p = _block_params(rng, d, "VA", 8)
    la_p = _block_params(rng, d, "LA", 8)
    la_p.update({"theta_w": _rand(rng, n, n), "theta_b": _rand(rng, n), "psi_w": _rand(rng, n, n),
                 "psi_b": _rand(rng, n)})
    z = _rand(rng, 2, n, d)
    a_init, ls = _rand(rng, 2, h, n, n), _rand(rng, h)
    incoming = _rand(rng, 2, h, n, n)
    va_keys = sorted(va_p)

    def va_block(z_, a0, ls_, *vals):
        out, _, _ = block_forward(z_, dict(zip(va_keys, vals)), "VA", h, residual_init=a0,
                                  layerscale=ls_, first=True)
        return out
    yield "va_block", "attention-layers", OP_TOL, lambda: gradient_check(
        _scalar_of(va_block, ws), [z, a_init, ls] + [va_p[k] for k in va_keys])
    la_keys = sorted(la_p)

    def la_block(z_, inc, *vals):
        out, _, _ = block_forward(z_, dict(zip(la_keys, vals)), "LA", h, incoming=inc)
        return out
    yield "la_block", "attention-layers", OP_TOL, lambda: gradient_check(
        _scalar_of(la_block, ws), [z, incoming] + [la_p[k] for k in la_keys])

    # 8 -> 2 tokens, rate 4
    a_last = _rand(rng, 2, 2, 8, 8)
    br = [_rand(rng, 2, 4, 4), _rand(rng, 3, 2), _rand(rng, 3)]

    def bridge(a_, dw, mw, mb):
        return downsample_attention(a_, {"dw": dw, "mix_w": mw, "mix_b": mb}, 2)
    yield "bridge", "attention-residual", OP_TOL, lambda: gradient_check(_scalar_of(bridge, ws), [a_last] + br)

    dp_in = _rand(rng, 2, 4, 4)
    yield "dp_loss", "losses-metrics", OP_TOL, lambda: gradient_check(lambda t: dp_loss(t), dp_in)
    logits = _rand(rng, 3, 4)
    labels = np.array([0, 3, 1])
    yield "cross_entropy", "losses-metrics", OP_TOL, lambda: gradient_check(
        lambda t: cross_entropy(t, labels), logits)

    yield "toy_model", "model-builder", MODEL_TOL, lambda: model_check(seed)


def model_check(seed: int = 0, batch: int = 2) -> float:
    """End-to-end check of CE + DP through the ``tiny`` preset (8x8 input)."""
    cfg = preset("tiny")
    model = build(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    names = model.params.names()
    values = [Tensor(0.5 * rng.standard_normal(model.params[k].shape)) for k in names]
    images = rng.random((batch, cfg.in_channels, *cfg.image_size))
    labels = np.arange(batch) % cfg.num_classes

    def f(*ts):
        m = LaViTModel(cfg, ParameterStore(dict(zip(names, ts))))
        res = forward(m, images, collect_diagnostics=False)
        terms = [(t.stage, t.layer, dp_loss(t.scores)) for t in res.la_layers()]
        return total_loss(cross_entropy(res.logits, labels), terms, 1.0).tensor
    # the deep composite is roundoff-limited at 1e-5; a wider step balances truncation
    return gradient_check(f, values, step=1e-4)


def run_suite(seed: int = 0, module: str | None = None) -> list[CheckResult]:
    results = []
    for name, mod, tol, thunk in _checks(seed):
        if module is not None and module != mod:
            continue
        results.append(CheckResult(name, mod, float(thunk()), tol))
    return results


MODULES = ("tensor-core", "attention-layers", "attention-residual", "losses-metrics", "model-builder")
