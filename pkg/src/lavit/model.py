"""Assemble and run a LaViT from a :class:`~lavit.config.ModelConfig`.

Parameter names are dotted paths such as ``stage2.block1.wq``; stages and
blocks are numbered from 1. Weights use the ``x @ W`` convention, so linear
weights are ``[in, out]``.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from lavit import ops
from lavit.attention import LayerTrace, block_forward
from lavit.config import ConfigError, ModelConfig
from lavit.residual import downsample_attention, downsample_rate
from lavit.tensor import ShapeError, Tensor

INIT_STD = 0.02
LA_NOISE_STD = 0.01
LARGE_TOKEN_LIMIT = 1024


class ParameterStore:
    """Ordered mapping of unique names to trainable tensors."""

    def __init__(self, items=None):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, value in (items or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        # existing tensors are kept as-is so a tape can still see them
        t = value if isinstance(value, Tensor) else Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def items(self):
        return self._params.items()

    def group(self, prefix: str) -> dict[str, Tensor]:
        """Parameters under ``prefix.`` keyed by the remaining name."""
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self._params.items() if k.startswith(prefix + ".")}

    def num_scalars(self) -> int:
        return int(sum(t.size for t in self._params.values()))

    def replace(self, values: dict[str, np.ndarray]) -> "ParameterStore":
        """New store with some tensors swapped out (others shared)."""
        out = ParameterStore()
        for k, t in self._params.items():
            out._params[k] = Tensor(values[k], requires_grad=True, name=k) if k in values else t
        return out

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: t.data for k, t in self._params.items()})

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._params.items()}


@dataclass
class LaViTModel:
    config: ModelConfig
    params: ParameterStore

    def layer_plan(self) -> list[list[str]]:
        return [s.layer_kinds() for s in self.config.stages]


def _trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    # truncated at two standard deviations, by resampling
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Every parameter as ``(name, shape, init kind)`` in allocation order."""
    f = config.flags
    out: list[tuple[str, tuple[int, ...], str]] = []

    def linear(prefix, n_in, n_out):
        out.append((f"{prefix}.w", (n_in, n_out), "trunc"))
        out.append((f"{prefix}.b", (n_out,), "zeros"))

    def norm(prefix, d):
        out.append((f"{prefix}_g", (d,), "ones"))
        out.append((f"{prefix}_b", (d,), "zeros"))

    s0 = config.stages[0]
    p = config.patch_size
    linear("embed", config.in_channels * p * p, s0.channels)
    norm("embed.ln", s0.channels)
    for m, st in enumerate(config.stages):
        name = f"stage{m + 1}"
        d = st.channels
        if m > 0:
            prev = config.stages[m - 1]
            linear(f"{name}.down", 4 * prev.channels, d)
            norm(f"{name}.down.ln", d)
            if f.attn_residual:
                r = downsample_rate(config.tokens(m - 1), config.tokens(m))
                out.append((f"{name}.bridge.dw", (prev.heads, r, r), "trunc"))
                if f.residual_norm and f.residual_norm_affine:
                    out.append((f"{name}.bridge.norm_g", (prev.heads,), "ones"))
                    out.append((f"{name}.bridge.norm_b", (prev.heads,), "zeros"))
                out.append((f"{name}.bridge.mix_w", (st.heads, prev.heads), "trunc"))
                out.append((f"{name}.bridge.mix_b", (st.heads,), "zeros"))
                out.append((f"{name}.bridge.ls", (st.heads,), "layerscale"))
        n_attn = config.attn_tokens(m)
        hidden = config.hidden(m)
        for li, kind in enumerate(st.layer_kinds(), start=1):
            b = f"{name}.block{li}"
            norm(f"{b}.ln1", d)
            if kind == "VA":
                for proj in ("wq", "wk", "wv", "wo"):
                    out.append((f"{b}.{proj}", (d, d), "trunc"))
                    if f.proj_bias:
                        out.append((f"{b}.b{proj[1]}", (d,), "zeros"))
            else:
                for t in ("theta", "psi"):
                    out.append((f"{b}.{t}_w", (n_attn, n_attn), "identity_noise"))
                    if f.la_bias:
                        out.append((f"{b}.{t}_b", (n_attn,), "zeros"))
                for proj in ("wv", "wo"):
                    out.append((f"{b}.{proj}", (d, d), "trunc"))
                    if f.proj_bias:
                        out.append((f"{b}.b{proj[1]}", (d,), "zeros"))
            norm(f"{b}.ln2", d)
            out.append((f"{b}.w1", (d, hidden), "trunc"))
            out.append((f"{b}.b1", (hidden,), "zeros"))
            out.append((f"{b}.w2", (hidden, d), "trunc"))
            out.append((f"{b}.b2", (d,), "zeros"))
    d_last = config.stages[-1].channels
    if f.pooling == "cls":
        out.append(("head.cls", (d_last,), "trunc"))
    norm("head.ln", d_last)
    linear("head", d_last, config.num_classes)
    return out


def _init(kind: str, shape, rng: np.random.Generator, config: ModelConfig) -> np.ndarray:
    if kind == "trunc":
        return _trunc_normal(rng, shape)
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "ones":
        return np.ones(shape)
    if kind == "identity_noise":
        return np.eye(shape[0]) + LA_NOISE_STD * rng.standard_normal(shape)
    if kind == "layerscale":
        return np.full(shape, config.flags.layerscale_init)
    raise ValueError(kind)


def build(config: ModelConfig, seed: int = 0) -> LaViTModel:
    """Allocate and deterministically initialize every parameter.

    Truncated normal (σ=0.02, cut at 2σ) for projection and conv weights, zeros
    for biases, ones/zeros for norm affines, identity plus N(0, 0.01²) noise for
    Ψ/Θ, ``flags.layerscale_init`` for LayerScale.
    """
    config.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    store = ParameterStore()
    for name, shape, kind in _param_shapes(config):
        store.add(name, _init(kind, shape, rng, config))
    return LaViTModel(config, store)


def param_count(config: ModelConfig) -> int:
    """Scalars the builder would allocate, without allocating them."""
    config.validate()
    return int(sum(int(np.prod(shape)) for _, shape, _ in _param_shapes(config)))


# ------------------------------------------------------------------ forward


def patch_embed(images: Tensor, w: Tensor, b: Tensor | None, p: int) -> Tensor:
    """Non-overlapping p×p convolution: ``[B, C, H, W] -> [B, HW/p², D]``.

    Patches are flattened in (channel, row, col) order to match ``w``'s rows;
    tokens are ordered row-major over the patch grid.
    """
    bsz, c, h, wd = images.shape
    if h % p or wd % p:
        raise ShapeError(f"image {h}x{wd} not divisible by patch size {p}")
    x = ops.reshape(images, (bsz, c, h // p, p, wd // p, p))
    x = ops.permute(x, (0, 2, 4, 1, 3, 5))
    x = ops.reshape(x, (bsz, (h // p) * (wd // p), c * p * p))
    return ops.linear_rowwise(x, w, b)


def token_downsample(z: Tensor, grid: tuple[int, int], w: Tensor, b: Tensor | None) -> Tensor:
    """Stride-2, kernel-2 convolution over the token grid: ``[B, N, D] -> [B, N/4, D']``.

    Window features are flattened in (row offset, col offset, channel) order.
    """
    bsz, n, d = z.shape
    gh, gw = grid
    if gh * gw != n or gh % 2 or gw % 2:
        raise ShapeError(f"cannot downsample {n} tokens on a {gh}x{gw} grid")
    x = ops.reshape(z, (bsz, gh // 2, 2, gw // 2, 2, d))
    x = ops.permute(x, (0, 1, 3, 2, 4, 5))
    x = ops.reshape(x, (bsz, (gh // 2) * (gw // 2), 4 * d))
    return ops.linear_rowwise(x, w, b)


@dataclass
class ForwardResult:
    logits: Tensor
    layers: list[LayerTrace]

    def la_layers(self) -> list[LayerTrace]:
        return [t for t in self.layers if t.kind == "LA"]


def _pad_class_token(a: Tensor) -> Tensor:
    # zero row/column for the class token at index 0
    *lead, h, n, _ = a.shape
    a = ops.concat([np.zeros((*lead, h, 1, n)), a], axis=-2)
    return ops.concat([np.zeros((*lead, h, n + 1, 1)), a], axis=-1)


def forward(model: LaViTModel, images, collect_diagnostics: bool = True) -> ForwardResult:
    """Run the model on ``[B, C, H, W]`` images.

    Returns logits ``[B, K]`` and, per layer, the pre- and post-softmax attention.
    With ``collect_diagnostics=False`` only LA layers are traced (their scores feed
    the DP loss).
    """
    cfg, P = model.config, model.params
    images = images if isinstance(images, Tensor) else Tensor(images)
    if images.ndim != 4 or images.shape[1] != cfg.in_channels or tuple(images.shape[2:]) != cfg.image_size:
        raise ShapeError(
            f"images {list(images.shape)} do not match config "
            f"[B, {cfg.in_channels}, {cfg.image_size[0]}, {cfg.image_size[1]}]"
        )
    if cfg.tokens(0) > LARGE_TOKEN_LIMIT and not cfg.flags.allow_large_forward:
        raise ConfigError(
            f"stage-1 attention over {cfg.tokens(0)} tokens is analyzer-only; "
            "set flags.allow_large_forward to run it"
        )
    bsz = images.shape[0]
    z = patch_embed(images, P["embed.w"], P["embed.b"], cfg.patch_size)
    z = ops.layer_norm(z, P["embed.ln_g"], P["embed.ln_b"])

    traces: list[LayerTrace] = []
    last_scores: Tensor | None = None
    for m, st in enumerate(cfg.stages):
        name = f"stage{m + 1}"
        a_init = None
        if m > 0:
            z = token_downsample(z, cfg.grid(m - 1), P[f"{name}.down.w"], P[f"{name}.down.b"])
            z = ops.layer_norm(z, P[f"{name}.down.ln_g"], P[f"{name}.down.ln_b"])
            if cfg.flags.attn_residual:
                a_init = downsample_attention(
                    last_scores, P.group(f"{name}.bridge"), cfg.tokens(m),
                    normalize=cfg.flags.residual_norm, affine=cfg.flags.residual_norm_affine,
                )
        is_cls_stage = cfg.flags.pooling == "cls" and m == cfg.num_stages - 1
        if is_cls_stage:
            cls = ops.reshape(P["head.cls"], (1, 1, st.channels))
            z = ops.concat([ops.mul(cls, np.ones((bsz, 1, 1))), z], axis=1)
            if a_init is not None:
                a_init = _pad_class_token(a_init)
        scores = None
        for li, kind in enumerate(st.layer_kinds(), start=1):
            first = li == 1
            bp = P.group(f"{name}.block{li}")
            z, scores, weights = block_forward(
                z, bp, kind, st.heads,
                incoming=scores if kind == "LA" else None,
                residual_init=a_init if first else None,
                layerscale=P[f"{name}.bridge.ls"] if first and a_init is not None else None,
                first=first,
            )
            if collect_diagnostics or kind == "LA":
                traces.append(LayerTrace(m + 1, li, kind, scores, weights))
        last_scores = scores
    if cfg.flags.pooling == "cls":
        pooled = ops.reshape(ops.slice_axis(z, 1, 0, 1), (bsz, cfg.stages[-1].channels))
    else:
        pooled = ops.mean(z, axis=1)
    pooled = ops.layer_norm(pooled, P["head.ln_g"], P["head.ln_b"])
    logits = ops.linear_rowwise(pooled, P["head.w"], P["head.b"])
    return ForwardResult(logits, traces)
