"""Acceptance criteria C1-C9.

Each test prints one ``PASS Cn: ...`` or ``FAIL Cn: ...`` line to the terminal
(even without ``-s``) before asserting. The long training criteria are marked
``slow``; deselect them with ``-m "not slow"``.
"""

import math
import struct
import time

import numpy as np
import pytest

import oracles
from lavit.attention import la_transform
from lavit.checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from lavit.config import TABLE2, preset
from lavit.data import make_synthetic
from lavit.experiments import saturation_pair, symmetry_pair
from lavit.flops import flops_report
from lavit.gradsuite import run_suite
from lavit.losses import cross_entropy, dp_loss, symmetry_score
from lavit.model import ParameterStore, build, forward
from lavit.tensor import FlopsMeter, Tape, Tensor
from lavit.train import TrainConfig, accuracy, train

SEEDS = range(5)


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail}")
        return ok
    return emit


def test_c1_gradient_suite(report):
    t0 = time.perf_counter()
    results = run_suite(0)
    elapsed = time.perf_counter() - t0
    bad = [f"{r.name}={r.error:.2e}" for r in results if not r.ok]
    worst = max(results, key=lambda r: r.error / r.tol)
    ok = not bad and elapsed < 120
    report("C1", ok, f"{len(results)} checks, worst {worst.name} {worst.error:.2e} (< {worst.tol:.0e}), "
                     f"{elapsed:.1f}s; failing: {bad or 'none'}")
    assert ok


def test_c2_golden_values(report):
    got = {
        "dp(I2)": (dp_loss(np.eye(2)[None]).item(), 2.0),
        "dp(swap)": (dp_loss(np.array([[[0.0, 1.0], [1.0, 0.0]]])).item(), -2.0),
        "S([[0,1],[0,0]])": (symmetry_score(np.array([[0.0, 1.0], [0.0, 0.0]])), 0.5),
        "CE(uniform,4)": (cross_entropy(np.zeros((1, 4)), np.array([2])).item(), math.log(4)),
    }
    errs = {k: abs(v - e) for k, (v, e) in got.items()}
    ok = max(errs.values()) <= 1e-12
    report("C2", ok, ", ".join(f"{k} err {e:.1e}" for k, e in errs.items()))
    assert ok


def test_c3_la_algebra(report):
    worst = 0.0
    for seed in range(100):
        r = np.random.default_rng(seed)
        h, n = int(r.integers(1, 4)), int(r.integers(2, 9))
        a, tw, pw = r.standard_normal((h, n, n)), r.standard_normal((n, n)), r.standard_normal((n, n))
        p = {"theta_w": Tensor(tw), "psi_w": Tensor(pw), "theta_b": Tensor(np.zeros(n)),
             "psi_b": Tensor(np.zeros(n))}
        got = la_transform(Tensor(a), p).data
        expect = np.stack([pw.T @ a[i] @ tw for i in range(h)])
        worst = max(worst, float(np.abs(got - expect).max()))
    cfg = preset("toy")
    model = oracles.set_la_identity(oracles.perturb(build(cfg, 4), 4))
    x = np.random.default_rng(0).random((2, 1, *cfg.image_size))
    reuse = float(np.abs(forward(model, x).logits.data - oracles.forward(model, x, la_mode="reuse")).max())
    ok = worst <= 1e-12 and reuse <= 1e-10
    report("C3", ok, f"100 cases max err {worst:.1e} (<= 1e-12); identity-LA vs reuse oracle {reuse:.1e} (<= 1e-10)")
    assert ok


def test_c4_zero_layerscale_equals_no_bridge(report):
    worst = 0.0
    cfg = preset("toy")
    for seed in SEEDS:
        model = oracles.perturb(build(cfg, seed), seed)
        model.params = model.params.replace({"stage2.bridge.ls": np.zeros(cfg.stages[1].heads)})
        plain = build(cfg.with_flags(attn_residual=False))
        plain.params = ParameterStore({k: model.params[k].data for k in plain.params.names()})
        x = np.random.default_rng(seed).random((2, 1, *cfg.image_size))
        worst = max(worst, float(np.abs(forward(model, x).logits.data - forward(plain, x).logits.data).max()))
    ok = worst <= 1e-12
    report("C4", ok, f"max |logit diff| {worst:.1e} over 5 seeds (<= 1e-12)")
    assert ok


def test_c5_flops_accounting(report, capsys):
    mismatches = []
    for name in ("toy", "tiny", "toy-deep-va", "toy-deep-la"):
        cfg = preset(name)
        meter = FlopsMeter()
        x = np.random.default_rng(0).random((1, cfg.in_channels, *cfg.image_size))
        with Tape(meter=meter, record=False):
            forward(build(cfg), x, collect_diagnostics=False)
        if meter.flops != flops_report(cfg).total_flops:
            mismatches.append(name)
    cheaper, audit = [], []
    for name in TABLE2:
        rep = flops_report(preset(name), 224, preset_name=name)
        cheaper.append((name, rep.total_flops, rep.all_va_flops))
        audit.extend(rep.audit)
    strict = [f"{n} {f / 1e9:.3f}G vs all-VA {v / 1e9:.3f}G" for n, f, v in cheaper if not f < v]
    attributed = all("Gap attributed to" in line for line in audit if "OUTSIDE" in line)
    ok = not mismatches and not strict and attributed
    report("C5", ok, f"static == metered on toy configs: {not mismatches}; "
                     f"LA < all-VA violated by: {strict or 'none'}; gaps attributed: {attributed}")
    with capsys.disabled():
        print("\n".join(audit))
    assert not mismatches, mismatches
    assert attributed
    assert not strict, strict


@pytest.mark.slow
def test_c6_training_smoke(report, tmp_path):
    cfg = preset("toy")
    accs, times = [], []
    for sub in ("a", "b"):
        model = build(cfg, 0)
        data = make_synthetic(cfg, seed=0)
        t0 = time.perf_counter()
        train(model, data, TrainConfig(), 2000, out_dir=tmp_path / sub)
        times.append(time.perf_counter() - t0)
        accs.append(accuracy(model, *data.train_set()))
    same = (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    ok = accs[0] >= 0.9 and times[0] < 300 and same
    report("C6", ok, f"train acc {accs[0]:.3f} (>= 0.9) after 2000 steps in {times[0]:.0f}s (< 300s); "
                     f"byte-identical metrics: {same}")
    assert ok


@pytest.mark.slow
def test_c7_saturation_direction(report):
    pairs = [saturation_pair(s) for s in SEEDS]
    wins = sum(p.treated_lower for p in pairs)
    ok = wins >= 4
    detail = "; ".join(f"s{p.seed} VA {p.baseline:.3f} LA {p.treated:.3f}" for p in pairs)
    report("C7", ok, f"LA lower in {wins}/5 seeds (need 4): {detail}")
    assert ok


@pytest.mark.slow
def test_c8_symmetry_direction(report):
    pairs = [symmetry_pair(s) for s in SEEDS]
    wins = sum(p.treated_lower for p in pairs)
    ok = wins >= 4
    detail = "; ".join(f"s{p.seed} off {p.baseline:.3f} on {p.treated:.3f}" for p in pairs)
    report("C8", ok, f"DP-on lower in {wins}/5 seeds (need 4): {detail}")
    assert ok


def test_c9_serialization(report, tmp_path):
    cfg = preset("toy")
    model = oracles.perturb(build(cfg, 3), 3)
    path = tmp_path / "m.lavt"
    write_checkpoint(path, cfg, model.params)
    back = read_checkpoint(path)
    exact = back.config == cfg and all(
        model.params[k].data.tobytes() == back.params[k].data.tobytes() for k in model.params.names())
    raw = path.read_bytes()
    diagnostics = []
    for label, data in (("magic", b"XXXX" + raw[4:]), ("version", raw[:4] + struct.pack("<I", 2) + raw[8:])):
        path.write_bytes(data)
        try:
            read_checkpoint(path)
            diagnostics.append(None)
        except CheckpointError as exc:
            diagnostics.append(str(exc) if label in str(exc) else None)
    ok = exact and all(diagnostics)
    report("C9", ok, f"bit-exact round trip: {exact}; rejections: {diagnostics}")
    assert ok
