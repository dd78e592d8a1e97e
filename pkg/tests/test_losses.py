"""DP loss, cross-entropy, total loss and the two attention diagnostics."""

import csv
import io
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lavit.gradcheck import gradient_check
from lavit.losses import (
    CSV_HEADER,
    MetricRow,
    cross_entropy,
    dp_loss,
    layer_similarity,
    metric_rows_csv,
    symmetry_score,
    total_loss,
)
from lavit.tensor import ShapeError, Tensor


def dp_oracle(a, sign=1.0, column=False):
    """Nested-loop evaluation of the printed formula, averaged over heads."""
    vals = []
    for m in a.reshape(-1, a.shape[-1], a.shape[-1]):
        n = m.shape[0]
        src = m.T if column else m
        asym = sum(abs(m[i, j] - m[j, i]) for i in range(n) for j in range(n))
        diag = sum((n - 1) * src[i, i] - sum(src[i, j] for j in range(n) if j != i) for i in range(n))
        vals.append(asym + sign * diag)
    return sum(vals) / len(vals)


maps = arrays(np.float64, st.tuples(st.integers(1, 3), st.just(4), st.just(4)),
              elements=st.floats(-5, 5, allow_nan=False))


# ---------------------------------------------------------------- dp_loss

def test_dp_identity_two():
    assert dp_loss(np.eye(2)[None]).item() == pytest.approx(2.0, abs=1e-12)


def test_dp_zeros():
    assert dp_loss(np.zeros((1, 3, 3))).item() == 0.0


def test_dp_swap_matrix_negative():
    assert dp_loss(np.array([[[0.0, 1.0], [1.0, 0.0]]])).item() == pytest.approx(-2.0, abs=1e-12)


def test_dp_matches_loop_oracle():
    a = np.random.default_rng(0).standard_normal((3, 5, 5))
    assert dp_loss(a).item() == pytest.approx(dp_oracle(a), abs=1e-12)
    assert dp_loss(a, sign="reversed").item() == pytest.approx(dp_oracle(a, sign=-1.0), abs=1e-12)


@pytest.mark.parametrize("n", range(2, 7))
def test_dp_constant_symmetric_closed_form(n):
    c, o = 1.3, -0.4
    a = np.full((n, n), o)
    np.fill_diagonal(a, c)
    assert dp_loss(a[None]).item() == pytest.approx(n * (n - 1) * (c - o), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(maps)
def test_dp_transpose_invariant(a):
    t = np.swapaxes(a, -1, -2)
    assert dp_loss(a).item() == pytest.approx(dp_loss(t).item(), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(maps)
def test_dp_row_and_column_sums_agree(a):
    row = dp_loss(a, sum_axis="row").item()
    col = dp_loss(a, sum_axis="column").item()
    assert row == pytest.approx(col, abs=1e-9)
    assert col == pytest.approx(dp_oracle(a, column=True), abs=1e-9)


def test_dp_non_square():
    with pytest.raises(ShapeError):
        dp_loss(np.ones((1, 2, 3)))


def test_dp_unknown_flags():
    with pytest.raises(ValueError):
        dp_loss(np.eye(2)[None], sign="flipped")
    with pytest.raises(ValueError):
        dp_loss(np.eye(2)[None], sum_axis="diag")


def test_dp_scales_linearly():
    # as printed, the loss has no lower bound on unnormalized scores
    a = np.random.default_rng(1).standard_normal((2, 4, 4))
    base = dp_loss(a).item()
    assert dp_loss(10 * a).item() == pytest.approx(10 * base, rel=1e-12)


def test_dp_gradient():
    a = Tensor(np.random.default_rng(2).standard_normal((2, 4, 4)))
    assert gradient_check(dp_loss, a) < 1e-6


def test_dp_subgradient_zero_at_tie():
    from lavit.tensor import Tape
    a = Tensor(np.ones((1, 2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = dp_loss(a)
    (g,) = tape.gradient(loss, [a])
    # only the diagonal term contributes: +1 on the diagonal, -1 elsewhere
    np.testing.assert_array_equal(g[0], [[1.0, -1.0], [-1.0, 1.0]])


# ---------------------------------------------------------------- cross entropy

def test_ce_uniform():
    assert cross_entropy(np.zeros((2, 4)), np.array([0, 3])).item() == pytest.approx(math.log(4), abs=1e-12)


def test_ce_saturated():
    logits = np.zeros((1, 3))
    logits[0, 1] = 30.0
    assert cross_entropy(logits, np.array([1])).item() < 1e-9


def test_ce_extended_precision_oracle():
    r = np.random.default_rng(3)
    logits, labels = 3 * r.standard_normal((3, 5)), np.array([4, 0, 2])
    mpmath.mp.dps = 40
    terms = []
    for row, y in zip(logits, labels):
        lse = mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(float(v))) for v in row))
        terms.append(lse - mpmath.mpf(float(row[y])))
    assert cross_entropy(logits, labels).item() == pytest.approx(float(sum(terms) / 3), abs=1e-12)


def test_ce_label_range():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((1, 3)), np.array([-1]))


def test_ce_gradient():
    logits = Tensor(np.random.default_rng(4).standard_normal((3, 4)))
    assert gradient_check(lambda t: cross_entropy(t, np.array([0, 1, 3])), logits) < 1e-6


# ---------------------------------------------------------------- total loss

def test_total_weight_zero_is_ce():
    out = total_loss(Tensor(1.5), [(1, 2, Tensor(9.0))], dp_weight=0.0)
    assert out.total == 1.5
    assert out.dp == 9.0


def test_total_hand_sum():
    out = total_loss(1.0, [(1, 2, 2.0), (2, 2, -2.0)])
    assert out.total == pytest.approx(1.0, abs=1e-12)


def test_total_arithmetic_oracle():
    r = np.random.default_rng(5)
    ce, terms = float(r.random()), [float(v) for v in r.standard_normal(4)]
    out = total_loss(ce, [(1, i, v) for i, v in enumerate(terms)], dp_weight=0.3)
    assert out.total == pytest.approx(ce + 0.3 * math.fsum(terms), abs=1e-12)
    assert [v for _, _, v in out.dp_per_layer] == terms


# ---------------------------------------------------------------- symmetry score

def test_symmetry_of_symmetric_is_zero():
    a = np.random.default_rng(6).standard_normal((2, 4, 4))
    assert symmetry_score(a + np.swapaxes(a, -1, -2)) == 0.0


def test_symmetry_hand_value():
    assert symmetry_score(np.array([[[0.0, 1.0], [0.0, 0.0]]])) == pytest.approx(0.5, abs=1e-12)


def test_symmetry_loop_oracle():
    a = np.random.default_rng(7).standard_normal((2, 4, 4))
    total = sum(abs(a[h, i, j] - a[h, j, i]) for h in range(2) for i in range(4) for j in range(4))
    assert symmetry_score(a) == pytest.approx(total / 32, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(maps)
def test_symmetry_transpose_exact_and_nonnegative(a):
    assert symmetry_score(a) == symmetry_score(np.swapaxes(a, -1, -2))
    assert symmetry_score(a) >= 0


# ---------------------------------------------------------------- layer similarity

def test_similarity_self():
    a = np.random.default_rng(8).random((2, 3, 3))
    assert layer_similarity(a, a) == pytest.approx(1.0, abs=1e-12)


def test_similarity_orthogonal():
    assert layer_similarity(np.eye(2)[None], np.array([[[0.0, 1.0], [1.0, 0.0]]])) == 0.0


def test_similarity_zero_map():
    assert layer_similarity(np.zeros((1, 2, 2)), np.ones((1, 2, 2))) == 0.0


def test_similarity_cosine_oracle():
    r = np.random.default_rng(9)
    a, b = r.random((2, 4, 4)), r.random((2, 4, 4))
    cos = [float(np.dot(a[h].ravel(), b[h].ravel()) / (np.linalg.norm(a[h]) * np.linalg.norm(b[h])))
           for h in range(2)]
    assert layer_similarity(a, b) == pytest.approx(sum(cos) / 2, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(maps, maps)
def test_similarity_bounded_for_stochastic_maps(x, y):
    if x.shape != y.shape:
        y = np.resize(y, x.shape)
    px = np.exp(x - x.max(-1, keepdims=True))
    py = np.exp(y - y.max(-1, keepdims=True))
    px /= px.sum(-1, keepdims=True)
    py /= py.sum(-1, keepdims=True)
    s = layer_similarity(px, py)
    assert 0.0 <= s <= 1.0 + 1e-12


def test_similarity_shape_mismatch():
    with pytest.raises(ShapeError):
        layer_similarity(np.ones((1, 2, 2)), np.ones((1, 3, 3)))


# ---------------------------------------------------------------- CSV

def test_metric_csv_format():
    text = metric_rows_csv([MetricRow(1, 1, math.nan, 0.5, 2.0), MetricRow(1, 2, 1 / 3, 0.25, -1e-12)])
    rows = list(csv.reader(io.StringIO(text)))
    assert tuple(rows[0]) == CSV_HEADER
    assert rows[1] == ["1", "1", "nan", "0.5", "2"]
    assert rows[2] == ["1", "2", "0.333333333", "0.25", "-1e-12"]
