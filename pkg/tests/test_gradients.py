"""Every entry of the gradient-check suite, one test per check."""

import pytest

from lavit.gradsuite import MODEL_TOL, OP_TOL, run_suite


@pytest.fixture(scope="module")
def results():
    return {r.name: r for r in run_suite(0)}


NAMES = ["matmul", "softmax", "linear", "layer_norm", "gelu", "dwconv", "conv1x1", "la_transform",
         "va_block", "la_block", "bridge", "dp_loss", "cross_entropy", "toy_model"]


def test_suite_covers_all_checks(results):
    assert sorted(results) == sorted(NAMES)


@pytest.mark.parametrize("name", NAMES)
def test_check_passes(results, name):
    r = results[name]
    assert r.tol == (MODEL_TOL if name == "toy_model" else OP_TOL)
    assert r.error < r.tol, f"{name}: {r.error:.3e}"


def test_module_filter():
    assert {r.module for r in run_suite(0, "attention-layers")} == {"attention-layers"}
