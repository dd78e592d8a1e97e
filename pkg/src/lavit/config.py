"""Model configuration: stage layout, flags, presets and the JSON schema."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    """A configuration violates one of its invariants."""


@dataclass(frozen=True)
class StageConfig:
    """One stage: width ``channels``, ``blocks`` layers, ``heads`` heads.

    ``n_la`` is the number of leading VA layers before LA layers begin; 0 makes
    the whole stage VA. With ``n_la > 0`` the stage has ``n_la`` VA layers
    followed by ``blocks - n_la`` LA layers.
    """

    channels: int
    blocks: int
    heads: int
    n_la: int = 0

    @property
    def num_va(self) -> int:
        return self.blocks if self.n_la == 0 else self.n_la

    @property
    def num_la(self) -> int:
        return 0 if self.n_la == 0 else self.blocks - self.n_la

    def layer_kinds(self) -> list[str]:
        return ["VA"] * self.num_va + ["LA"] * self.num_la


@dataclass(frozen=True)
class Flags:
    proj_bias: bool = True  # Q/K/V/O projections
    la_bias: bool = True  # Ψ and Θ
    layerscale_init: float = 0.1
    attn_residual: bool = True  # attention-residual bridge between stages
    residual_norm: bool = True  # per-head standardization inside the bridge
    residual_norm_affine: bool = False
    dp_weight: float = 1.0
    dp_sign: str = "as_printed"  # or "reversed"
    dp_sum: str = "row"  # or "column"
    dp_target: str = "pre_softmax"  # or "post_softmax"
    pooling: str = "mean"  # or "cls"
    allow_large_forward: bool = False

    def validate(self) -> None:
        choices = {
            "dp_sign": ("as_printed", "reversed"),
            "dp_sum": ("row", "column"),
            "dp_target": ("pre_softmax", "post_softmax"),
            "pooling": ("mean", "cls"),
        }
        for name, allowed in choices.items():
            value = getattr(self, name)
            if value not in allowed:
                raise ConfigError(f"flags.{name} must be one of {allowed}, got {value!r}")
        if not math.isfinite(self.layerscale_init):
            raise ConfigError("flags.layerscale_init must be finite")
        if not math.isfinite(self.dp_weight):
            raise ConfigError("flags.dp_weight must be finite")


@dataclass(frozen=True)
class ModelConfig:
    image_size: tuple[int, int]
    in_channels: int
    patch_size: int
    num_classes: int
    stages: tuple[StageConfig, ...]
    mlp_ratio: float = 4.0
    flags: Flags = field(default_factory=Flags)

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(self.image_size))
        object.__setattr__(self, "stages", tuple(self.stages))

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def grid(self, stage: int) -> tuple[int, int]:
        """Token grid (rows, cols) of a 0-based stage."""
        h, w = self.image_size
        f = self.patch_size * 2**stage
        return h // f, w // f

    def tokens(self, stage: int) -> int:
        """Patch-token count of a 0-based stage (class token excluded)."""
        gh, gw = self.grid(stage)
        return gh * gw

    def attn_tokens(self, stage: int) -> int:
        """Side length of the stage's attention maps (class token included)."""
        extra = 1 if self.flags.pooling == "cls" and stage == self.num_stages - 1 else 0
        return self.tokens(stage) + extra

    def hidden(self, stage: int) -> int:
        return int(round(self.mlp_ratio * self.stages[stage].channels))

    def validate(self) -> "ModelConfig":
        if len(self.image_size) != 2 or min(self.image_size) < 1:
            raise ConfigError(f"image_size must be two positive integers, got {self.image_size}")
        if self.in_channels < 1 or self.patch_size < 1:
            raise ConfigError("in_channels and patch_size must be positive")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.stages:
            raise ConfigError("at least one stage is required")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")
        factor = self.patch_size * 2 ** (self.num_stages - 1)
        for side in self.image_size:
            if side % factor:
                raise ConfigError(
                    f"image side {side} must be divisible by patch_size*2^(stages-1) = {factor}"
                )
        for i, st in enumerate(self.stages, start=1):
            if st.channels < 1 or st.blocks < 1 or st.heads < 1:
                raise ConfigError(f"stage {i}: channels, blocks and heads must be positive")
            if st.channels % st.heads:
                raise ConfigError(f"stage {i}: channels {st.channels} not divisible by heads {st.heads}")
            if not 0 <= st.n_la <= st.blocks:
                raise ConfigError(f"stage {i}: n_la {st.n_la} outside [0, {st.blocks}]")
        self.flags.validate()
        return self

    def with_flags(self, **kw) -> "ModelConfig":
        return replace(self, flags=replace(self.flags, **kw))

    def with_stages(self, stages) -> "ModelConfig":
        return replace(self, stages=tuple(stages))

    # ------------------------------------------------------------ JSON schema

    def to_dict(self) -> dict:
        return {
            "image_size": list(self.image_size),
            "in_channels": self.in_channels,
            "patch_size": self.patch_size,
            "num_classes": self.num_classes,
            "mlp_ratio": self.mlp_ratio,
            "stages": [asdict(s) for s in self.stages],
            "flags": asdict(self.flags),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        top = {"image_size", "in_channels", "patch_size", "num_classes", "mlp_ratio", "stages", "flags"}
        _reject_unknown(doc, top, "config")
        required = top - {"mlp_ratio", "flags"}
        missing = sorted(required - doc.keys())
        if missing:
            raise ConfigError(f"config missing required keys: {', '.join(missing)}")
        size = doc["image_size"]
        if isinstance(size, int):
            size = [size, size]
        stage_keys = {f.name for f in fields(StageConfig)}
        stages = []
        for i, s in enumerate(doc["stages"], start=1):
            if not isinstance(s, dict):
                raise ConfigError(f"stages[{i}] must be an object")
            _reject_unknown(s, stage_keys, f"stages[{i}]")
            try:
                stages.append(StageConfig(**{k: _as_int(v, f"stages[{i}].{k}") for k, v in s.items()}))
            except TypeError as exc:
                raise ConfigError(f"stages[{i}]: {exc}") from None
        flag_doc = doc.get("flags", {}) or {}
        _reject_unknown(flag_doc, {f.name for f in fields(Flags)}, "flags")
        cfg = cls(
            image_size=tuple(_as_int(v, "image_size") for v in size),
            in_channels=_as_int(doc["in_channels"], "in_channels"),
            patch_size=_as_int(doc["patch_size"], "patch_size"),
            num_classes=_as_int(doc["num_classes"], "num_classes"),
            stages=tuple(stages),
            mlp_ratio=float(doc.get("mlp_ratio", 4.0)),
            flags=Flags(**flag_doc),
        )
        return cfg.validate()

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        return cls.from_json(Path(path).read_text())


def _reject_unknown(doc: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {', '.join(unknown)}")


def _as_int(v, where: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{where} must be an integer, got {v!r}")
    return v


def _table1(blocks, n_la) -> tuple[StageConfig, ...]:
    channels = (64, 128, 320, 512)
    heads = (1, 2, 5, 8)
    return tuple(StageConfig(c, b, h, n) for c, b, h, n in zip(channels, blocks, heads, n_la))


def preset(name: str) -> ModelConfig:
    """Named configurations: the three ImageNet presets and desk-scale toys."""
    if name in _IMAGENET:
        blocks, n_la = _IMAGENET[name]
        return ModelConfig(
            image_size=(224, 224), in_channels=3, patch_size=4, num_classes=1000,
            stages=_table1(blocks, n_la),
        ).validate()
    if name in _TOYS:
        return _TOYS[name]().validate()
    raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


_IMAGENET = {
    "lavit-t": ((2, 2, 2, 2), (0, 0, 2, 2)),
    "lavit-s": ((3, 4, 6, 3), (0, 0, 3, 2)),
    "lavit-b": ((3, 3, 18, 3), (0, 2, 4, 3)),
}

# as-printed DP on pre-softmax scores is unbounded below and swamps CE at toy
# scale; training toys apply it to post-softmax maps instead
_TOY_FLAGS = Flags(dp_target="post_softmax")

_TOYS = {
    # 2-stage LaViT for the 32x32 synthetic task
    "toy": lambda: ModelConfig(
        image_size=(32, 32), in_channels=1, patch_size=4, num_classes=4,
        stages=(StageConfig(16, 1, 1, 0), StageConfig(32, 2, 2, 1)),
        mlp_ratio=2.0,
        flags=_TOY_FLAGS,
    ),
    # smallest model exercising every component (gradient checks)
    "tiny": lambda: ModelConfig(
        image_size=(8, 8), in_channels=1, patch_size=2, num_classes=3,
        stages=(StageConfig(4, 1, 1, 0), StageConfig(8, 2, 2, 1)),
        mlp_ratio=2.0,
    ),
    # 12-layer single-stage pair for the saturation experiment
    "toy-deep-va": lambda: ModelConfig(
        image_size=(32, 32), in_channels=1, patch_size=8, num_classes=4,
        stages=(StageConfig(16, 12, 2, 0),), mlp_ratio=2.0,
        flags=_TOY_FLAGS,
    ),
    "toy-deep-la": lambda: ModelConfig(
        image_size=(32, 32), in_channels=1, patch_size=8, num_classes=4,
        stages=(StageConfig(16, 12, 2, 2),), mlp_ratio=2.0,
        flags=_TOY_FLAGS,
    ),
}

PRESETS = tuple(_IMAGENET) + tuple(_TOYS)
TABLE2 = {  # reported Params (M) and FLOPs (G) at 224x224
    "lavit-t": (10.9, 1.6),
    "lavit-s": (22.4, 3.3),
    "lavit-b": (39.6, 6.1),
}
