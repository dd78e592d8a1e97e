"""Paired training experiments on the toy presets.

Both helpers train two models from the same seed on the same data stream and
return the probe statistics that decide each comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lavit.config import ModelConfig, preset
from lavit.data import make_synthetic
from lavit.losses import layer_similarity, symmetry_score
from lavit.model import build, forward
from lavit.tensor import no_grad
from lavit.train import TrainConfig, accuracy, train

SATURATION_STEPS = 500
SYMMETRY_STEPS = 500


@dataclass(frozen=True)
class PairResult:
    seed: int
    baseline: float
    treated: float
    baseline_acc: float
    treated_acc: float

    @property
    def treated_lower(self) -> bool:
        return self.treated < self.baseline


def _fit(cfg: ModelConfig, seed: int, steps: int, tc: TrainConfig):
    model = build(cfg, seed)
    data = make_synthetic(cfg, seed=seed)
    train(model, data, tc, steps)
    x, y = data.train_set()
    probe, _ = data.probe_batch(tc.probe_size)
    with no_grad():
        result = forward(model, probe, collect_diagnostics=True)
    return result, accuracy(model, x, y)


def consecutive_similarity(result, first_layer: int, stage: int = 1) -> float:
    """Mean similarity of layer ``l`` to ``l-1`` for ``l >= first_layer`` (1-based) in ``stage``."""
    maps = {t.layer: t.weights for t in result.layers if t.stage == stage}
    sims = [layer_similarity(maps[l], maps[l - 1]) for l in sorted(maps) if l >= max(first_layer, 2)]
    return float(np.mean(sims))


def la_symmetry(result) -> float:
    """Symmetry score of pre-softmax scores, averaged over LA layers."""
    return float(np.mean([symmetry_score(t.scores) for t in result.la_layers()]))


def saturation_pair(seed: int, steps: int = SATURATION_STEPS, tc: TrainConfig | None = None) -> PairResult:
    """All-VA vs LA-from-layer-3 twelve-layer toys; similarity over the LA region."""
    tc = tc or TrainConfig()
    la_cfg = preset("toy-deep-la")
    first_la = la_cfg.stages[-1].num_va + 1
    va_res, va_acc = _fit(preset("toy-deep-va"), seed, steps, tc)
    la_res, la_acc = _fit(la_cfg, seed, steps, tc)
    return PairResult(seed, consecutive_similarity(va_res, first_la),
                      consecutive_similarity(la_res, first_la), va_acc, la_acc)


def symmetry_pair(seed: int, steps: int = SYMMETRY_STEPS, tc: TrainConfig | None = None) -> PairResult:
    """Toy LaViT trained with dp_weight=0 (baseline) vs dp_weight=1 (treated)."""
    tc = tc or TrainConfig()
    cfg = preset("toy")
    off_res, off_acc = _fit(cfg.with_flags(dp_weight=0.0), seed, steps, tc)
    on_res, on_acc = _fit(cfg.with_flags(dp_weight=1.0), seed, steps, tc)
    return PairResult(seed, la_symmetry(off_res), la_symmetry(on_res), off_acc, on_acc)
