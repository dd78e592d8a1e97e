"""Deterministic toy-scale training loop and attention probes."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from lavit.checkpoint import write_checkpoint
from lavit.data import SyntheticDataset
from lavit.losses import (
    MetricRow,
    cross_entropy,
    dp_loss,
    layer_similarity,
    metric_rows_csv,
    symmetry_score,
    total_loss,
)
from lavit.model import LaViTModel, forward
from lavit.optim import OptimizerState, adamw_step, clip_global_norm, cosine_lr
from lavit.tensor import Tape, no_grad


class DivergenceError(RuntimeError):
    """Total loss became NaN or infinite."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings. Defaults are sized for minute-scale CPU runs."""

    batch_size: int = 32
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    warmup_steps: int = 100
    weight_decay: float = 0.05
    clip_norm: float = 1.0
    eval_interval: int = 100
    checkpoint_every: int = 0
    apply_dp: bool = True
    probe_size: int = 16


# ImageNet-scale recipe, kept for reference only; not used by toy runs.
IMAGENET_RECIPE = TrainConfig(batch_size=1024, lr_max=5e-3, lr_min=1e-5, warmup_steps=5 * 1251,
                              weight_decay=0.05, clip_norm=1.0)


def dp_terms(model: LaViTModel, result) -> list:
    """``(stage, layer, dp_loss)`` for every LA layer of a forward result."""
    flags = model.config.flags
    out = []
    for t in result.la_layers():
        a = t.scores if flags.dp_target == "pre_softmax" else t.weights
        out.append((t.stage, t.layer, dp_loss(a, sign=flags.dp_sign, sum_axis=flags.dp_sum)))
    return out


def loss_and_grads(model: LaViTModel, images, labels, apply_dp: bool = True):
    """Forward, loss and gradients for every parameter, in store order."""
    params = model.params.tensors()
    with Tape() as tape:
        result = forward(model, images, collect_diagnostics=False)
        ce = cross_entropy(result.logits, labels)
        weight = model.config.flags.dp_weight if apply_dp else 0.0
        loss = total_loss(ce, dp_terms(model, result), weight)
    grads = tape.gradient(loss.tensor, params)
    return loss, result, grads


def probe_rows(model: LaViTModel, images) -> list[MetricRow]:
    """Per-layer similarity (to the previous layer of the same stage), symmetry and DP loss.

    Similarity uses post-softmax maps and is NaN for the first layer of each stage.
    Symmetry and DP loss use pre-softmax scores.
    """
    flags = model.config.flags
    with no_grad():
        result = forward(model, images, collect_diagnostics=True)
    rows = []
    prev = None
    for t in result.layers:
        if prev is None or prev.stage != t.stage:
            sim = math.nan
        else:
            sim = layer_similarity(t.weights, prev.weights)
        dp = dp_loss(t.scores, sign=flags.dp_sign, sum_axis=flags.dp_sum).item()
        rows.append(MetricRow(t.stage, t.layer, sim, symmetry_score(t.scores), dp))
        prev = t
    return rows


def train_iter(model: LaViTModel, dataset: SyntheticDataset, cfg: TrainConfig,
               steps: int, collect: str = "none") -> Iterator[tuple[dict, list[MetricRow] | None]]:
    """Yield ``(record, probe_rows_or_None)`` after each step; updates ``model`` in place.

    Probe rows are produced every ``eval_interval`` steps and at the last step
    when ``collect == "saturation"``.
    """
    if collect not in ("none", "saturation"):
        raise ValueError(f"collect must be 'none' or 'saturation', got {collect!r}")
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    if steps == 0:
        return
    names = model.params.names()
    decay = {k: model.params[k].ndim >= 2 for k in names}
    state = OptimizerState(lr=cfg.lr_max, weight_decay=cfg.weight_decay)
    probe_x, _ = dataset.probe_batch(cfg.probe_size)
    batches = dataset.batches(cfg.batch_size)
    for step in range(1, steps + 1):
        x, y = next(batches)
        loss, result, grads = loss_and_grads(model, x, y, cfg.apply_dp)
        if not math.isfinite(loss.total):
            raise DivergenceError(
                f"step {step}: total loss {loss.total} (ce={loss.ce}, dp={loss.dp}); "
                "lower lr_max or dp_weight"
            )
        acc = float(np.mean(np.argmax(result.logits.data, axis=1) == y))
        lr = cosine_lr(step - 1, steps, min(cfg.warmup_steps, steps - 1), cfg.lr_max, cfg.lr_min)
        gdict = dict(zip(names, grads))
        if cfg.clip_norm > 0:
            gdict, _ = clip_global_norm(gdict, cfg.clip_norm)
        new = adamw_step(model.params.state(), gdict, state, lr=lr, decay=decay)
        model.params = model.params.replace(new)
        rec = {"step": step, "lr": lr, "ce": loss.ce, "dp": loss.dp, "total": loss.total, "acc": acc}
        rows = None
        if collect == "saturation" and (step % cfg.eval_interval == 0 or step == steps):
            rows = probe_rows(model, probe_x)
        yield rec, rows


def train(model: LaViTModel, dataset: SyntheticDataset, cfg: TrainConfig, steps: int,
          collect: str = "none", out_dir: str | Path | None = None) -> list[dict]:
    """Train ``model`` in place and return the per-step records.

    With ``out_dir``: ``metrics.jsonl`` (one record per step),
    ``saturation_step{N}.csv`` probes, and ``checkpoint_step{N}.lavt`` every
    ``checkpoint_every`` steps plus ``final.lavt``.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics = open(out / "metrics.jsonl", "w", encoding="utf-8")
    records = []
    try:
        for rec, rows in train_iter(model, dataset, cfg, steps, collect):
            records.append(rec)
            if out is None:
                continue
            metrics.write(json.dumps(rec) + "\n")
            step = rec["step"]
            if rows is not None:
                (out / f"saturation_step{step}.csv").write_text(metric_rows_csv(rows), encoding="utf-8")
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                write_checkpoint(out / f"checkpoint_step{step}.lavt", model.config, model.params)
    finally:
        if out is not None:
            metrics.close()
    if out is not None:
        write_checkpoint(out / "final.lavt", model.config, model.params)
    return records


def accuracy(model: LaViTModel, images, labels, batch_size: int = 64) -> float:
    """Classification accuracy without recording a tape."""
    hits = 0
    with no_grad():
        for s in range(0, len(labels), batch_size):
            logits = forward(model, images[s:s + batch_size], collect_diagnostics=False).logits.data
            hits += int(np.sum(np.argmax(logits, axis=1) == labels[s:s + batch_size]))
    return hits / len(labels)


__all__ = [
    "DivergenceError", "IMAGENET_RECIPE", "TrainConfig", "accuracy", "dp_terms",
    "loss_and_grads", "probe_rows", "train", "train_iter",
]
