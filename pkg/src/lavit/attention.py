"""Vanilla Attention (VA) and Less-Attention (LA) layers and the pre-norm block.

Attention tensors are ``[..., H, N, N]``. Head ``h`` owns feature columns
``[h*d, (h+1)*d)`` of the ``[..., N, D]`` projections. Scores passed between
layers are always pre-softmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

from lavit import ops
from lavit.tensor import ShapeError, Tensor

Params = Mapping[str, Tensor]


class LayerStateError(ValueError):
    """An attention layer was called with an illegal incoming state."""


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``[..., N, D] -> [..., H, N, D/H]``."""
    *lead, n, dim = x.shape
    if dim % heads:
        raise ShapeError(f"width {dim} not divisible by {heads} heads")
    x = ops.reshape(x, (*lead, n, heads, dim // heads))
    k = len(lead)
    return ops.permute(x, (*range(k), k + 1, k, k + 2))


def merge_heads(x: Tensor) -> Tensor:
    """``[..., H, N, d] -> [..., N, H*d]`` (inverse of :func:`split_heads`)."""
    *lead, h, n, d = x.shape
    k = len(lead)
    x = ops.permute(x, (*range(k), k + 1, k, k + 2))
    return ops.reshape(x, (*lead, n, h * d))


def va_scores(z: Tensor, p: Params, heads: int) -> Tensor:
    """Pre-softmax scores ``Q_h K_h^T / sqrt(d)`` for every head."""
    dim = z.shape[-1]
    if dim % heads:
        raise ShapeError(f"width {dim} not divisible by {heads} heads")
    q = split_heads(ops.linear_rowwise(z, p["wq"], p.get("bq")), heads)
    k = split_heads(ops.linear_rowwise(z, p["wk"], p.get("bk")), heads)
    return ops.mul(ops.matmul(q, ops.transpose_last2(k)), 1.0 / math.sqrt(dim // heads))


def la_transform(a: Tensor, p: Params) -> Tensor:
    """Re-parameterize stored scores: Θ row-wise, transpose, Ψ row-wise, transpose.

    With zero biases this is ``Wψᵀ · A · Wθ`` per head.
    """
    n = a.shape[-1]
    if a.shape[-2] != n or p["theta_w"].shape != (n, n) or p["psi_w"].shape != (n, n):
        raise ShapeError(
            f"la_transform: scores {list(a.shape)} vs theta {list(p['theta_w'].shape)}, "
            f"psi {list(p['psi_w'].shape)}"
        )
    t = ops.transpose_last2(ops.linear_rowwise(a, p["theta_w"], p.get("theta_b")))
    return ops.transpose_last2(ops.linear_rowwise(t, p["psi_w"], p.get("psi_b")))


def attention_apply(scores: Tensor, z: Tensor, p: Params) -> tuple[Tensor, Tensor]:
    """``Softmax(scores) · V`` per head, heads concatenated, then the output projection.

    Returns ``(output [..., N, D], post-softmax weights [..., H, N, N])``.
    """
    heads = scores.shape[-3]
    if scores.shape[-1] != z.shape[-2]:
        raise ShapeError(f"scores {list(scores.shape)} incompatible with tokens {list(z.shape)}")
    v = split_heads(ops.linear_rowwise(z, p["wv"], p.get("bv")), heads)
    weights = ops.softmax_rows(scores)
    out = merge_heads(ops.matmul(weights, v))
    return ops.linear_rowwise(out, p["wo"], p.get("bo")), weights


def inject_residual(a_va: Tensor, a_init: Tensor, layerscale: Tensor) -> Tensor:
    """``a_va[h] + layerscale[h] * a_init[h]`` for every head."""
    if a_va.shape != a_init.shape:
        raise ShapeError(f"inject_residual: {list(a_va.shape)} vs {list(a_init.shape)}")
    heads = a_va.shape[-3]
    if layerscale.shape != (heads,):
        raise ShapeError(f"layerscale shape {list(layerscale.shape)} != [{heads}]")
    return ops.add(a_va, ops.mul(a_init, ops.reshape(layerscale, (heads, 1, 1))))


def feed_forward(x: Tensor, p: Params) -> Tensor:
    h = ops.gelu(ops.linear_rowwise(x, p["w1"], p.get("b1")))
    return ops.linear_rowwise(h, p["w2"], p.get("b2"))


@dataclass
class LayerTrace:
    """Attention produced by one layer; ``scores`` pre-softmax, ``weights`` post."""

    stage: int  # 1-based
    layer: int  # 1-based within the stage
    kind: str  # "VA" or "LA"
    scores: Tensor
    weights: Tensor


def block_forward(z: Tensor, p: Params, kind: str, heads: int,
                  incoming: Tensor | None = None,
                  residual_init: Tensor | None = None,
                  layerscale: Tensor | None = None,
                  first: bool = False) -> tuple[Tensor, Tensor, Tensor]:
    """Pre-norm transformer block.

    ``Z' = Z + Attn(LN(Z))`` then ``Z_out = Z' + FFN(LN(Z'))``. VA layers compute
    fresh scores (plus the LayerScale'd residual when ``residual_init`` is given);
    LA layers transform ``incoming``. Returns ``(Z_out, scores, weights)``.
    """
    if residual_init is not None and not (first and kind == "VA"):
        raise LayerStateError("residual_init is only legal on the first VA layer of a stage")
    x = ops.layer_norm(z, p["ln1_g"], p["ln1_b"])
    if kind == "VA":
        scores = va_scores(x, p, heads)
        if residual_init is not None:
            if layerscale is None:
                raise LayerStateError("residual_init supplied without layerscale")
            scores = inject_residual(scores, residual_init, layerscale)
    elif kind == "LA":
        if incoming is None:
            raise LayerStateError("LA layer needs the previous layer's attention scores")
        scores = la_transform(incoming, p)
    else:
        raise ValueError(f"unknown layer kind {kind!r}")
    attn_out, weights = attention_apply(scores, x, p)
    z = ops.add(z, attn_out)
    z = ops.add(z, feed_forward(ops.layer_norm(z, p["ln2_g"], p["ln2_b"]), p))
    return z, scores, weights
