"""Diagonality-preserving loss, total objective and attention diagnostics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from lavit import ops
from lavit.ops import cross_entropy
from lavit.tensor import ShapeError, Tensor, as_tensor

__all__ = [
    "dp_loss",
    "cross_entropy",
    "total_loss",
    "LossBreakdown",
    "symmetry_score",
    "layer_similarity",
    "MetricRow",
    "metric_rows_csv",
]


def _check_square(shape, name: str) -> None:
    if len(shape) < 2 or shape[-1] != shape[-2]:
        raise ShapeError(f"{name} expects square [..., N, N] maps, got {list(shape)}")


def dp_loss(a, sign: str = "as_printed", sum_axis: str = "row") -> Tensor:
    """Diagonality-preserving loss, averaged over heads (and any batch axes).

    Per map: ``Σ_ij |A_ij - A_ji| + Σ_i ((N-1)·A_ii - Σ_{j≠i} A_ij)``.
    ``sign="reversed"`` negates the second summand. ``sum_axis`` picks row or
    column sums in the second summand; both give the same total, the option is
    kept so the choice is explicit.
    """
    a = as_tensor(a)
    _check_square(a.shape, "dp_loss")
    if sign not in ("as_printed", "reversed"):
        raise ValueError(f"unknown dp sign {sign!r}")
    if sum_axis not in ("row", "column"):
        raise ValueError(f"unknown dp sum axis {sum_axis!r}")
    n = a.shape[-1]
    asym = ops.sum(ops.absolute(ops.sub(a, ops.transpose_last2(a))), axis=(-2, -1))
    src = a if sum_axis == "row" else ops.transpose_last2(a)
    trace = ops.sum(ops.mul(src, np.eye(n)), axis=(-2, -1))
    off = ops.sub(ops.sum(src, axis=(-2, -1)), trace)
    diag_term = ops.sub(ops.mul(trace, float(n - 1)), off)
    if sign == "reversed":
        diag_term = ops.mul(diag_term, -1.0)
    return ops.mean(ops.add(asym, diag_term))


@dataclass
class LossBreakdown:
    ce: float
    dp_per_layer: list[tuple[int, int, float]]
    total: float
    dp_weight: float = 1.0
    tensor: Tensor | None = field(default=None, repr=False)

    @property
    def dp(self) -> float:
        return float(sum(v for _, _, v in self.dp_per_layer))


def total_loss(ce, dp_terms: Sequence[tuple[int, int, Tensor | float]],
               dp_weight: float = 1.0) -> LossBreakdown:
    """``ce + dp_weight * Σ dp_terms``; ``dp_terms`` are ``(stage, layer, value)``."""
    ce_t = as_tensor(ce)
    total = ce_t
    if dp_weight != 0.0:
        for _, _, term in dp_terms:
            total = ops.add(total, ops.mul(as_tensor(term), float(dp_weight)))
    return LossBreakdown(
        ce=ce_t.item(),
        dp_per_layer=[(s, l, as_tensor(v).item()) for s, l, v in dp_terms],
        total=total.item(),
        dp_weight=dp_weight,
        tensor=total,
    )


def _as_array(a) -> np.ndarray:
    return a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)


def symmetry_score(a) -> float:
    """Mean of ``|A_ij - A_ji|`` over every head (and batch) entry."""
    arr = _as_array(a)
    _check_square(arr.shape, "symmetry_score")
    return float(np.abs(arr - np.swapaxes(arr, -1, -2)).mean())


def layer_similarity(a_cur, a_prev) -> float:
    """Cosine similarity of flattened per-head maps, averaged over heads.

    Zero maps have similarity 0.
    """
    cur, prev = _as_array(a_cur), _as_array(a_prev)
    if cur.shape != prev.shape:
        raise ShapeError(f"layer_similarity: {list(cur.shape)} vs {list(prev.shape)}")
    _check_square(cur.shape, "layer_similarity")
    n = cur.shape[-1]
    x = cur.reshape(-1, n * n)
    y = prev.reshape(-1, n * n)
    norms = np.linalg.norm(x, axis=1) * np.linalg.norm(y, axis=1)
    dots = (x * y).sum(axis=1)
    cos = np.divide(dots, norms, out=np.zeros_like(dots), where=norms > 0)
    return float(cos.mean())


@dataclass
class MetricRow:
    stage: int
    layer: int
    similarity: float
    symmetry: float
    dp_loss: float


CSV_HEADER = ("stage", "layer", "similarity", "symmetry", "dp_loss")


def metric_rows_csv(rows: Iterable[MetricRow]) -> str:
    """Render rows as CSV with a header and 9 significant digits."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([r.stage, r.layer, f"{r.similarity:.9g}", f"{r.symmetry:.9g}", f"{r.dp_loss:.9g}"])
    return buf.getvalue()
