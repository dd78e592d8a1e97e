"""Attention-residual bridge between consecutive stages.

The last scores of stage m-1 (``[..., H_prev, N_prev, N_prev]``) go through a
depthwise conv with kernel = stride = r, a per-head standardization and a 1x1
conv across heads, producing ``[..., H_cur, N_cur, N_cur]``. The first VA layer of
stage m adds that map, scaled per head by LayerScale, to its own scores.
"""

from __future__ import annotations

from typing import Mapping

from lavit import ops
from lavit.attention import inject_residual
from lavit.tensor import ShapeError, Tensor

__all__ = ["downsample_rate", "downsample_attention", "inject_residual"]


def downsample_rate(n_prev: int, n_cur: int) -> int:
    """Per-axis rate r mapping an ``N_prev`` attention side onto ``N_cur``."""
    if n_cur < 1 or n_prev % n_cur:
        raise ShapeError(f"attention side {n_prev} is not an integer multiple of {n_cur}")
    return n_prev // n_cur


def _standardize_maps(x: Tensor, p: Mapping[str, Tensor], affine: bool) -> Tensor:
    *lead, h, n, _ = x.shape
    flat = ops.layer_norm(ops.reshape(x, (*lead, h, n * n)))
    out = ops.reshape(flat, x.shape)
    if affine:
        out = ops.add(ops.mul(out, ops.reshape(p["norm_g"], (h, 1, 1))),
                      ops.reshape(p["norm_b"], (h, 1, 1)))
    return out


def downsample_attention(a_last: Tensor, p: Mapping[str, Tensor], n_cur: int,
                         normalize: bool = True, affine: bool = False) -> Tensor:
    """``Conv1x1(Norm(DWConv(a_last)))`` with the rate derived from token counts."""
    n_prev = a_last.shape[-1]
    r = downsample_rate(n_prev, n_cur)
    h_prev = a_last.shape[-3]
    if p["dw"].shape != (h_prev, r, r):
        raise ShapeError(f"dw kernels {list(p['dw'].shape)} != [{h_prev}, {r}, {r}]")
    if p["mix_w"].shape[1] != h_prev:
        raise ShapeError(f"mix weight {list(p['mix_w'].shape)} expects {p['mix_w'].shape[1]} heads, got {h_prev}")
    x = ops.dwconv_square(a_last, p["dw"], r)
    if normalize:
        x = _standardize_maps(x, p, affine)
    return ops.conv1x1_channels(x, p["mix_w"], p.get("mix_b"))
