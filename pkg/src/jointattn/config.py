"""Model/training configuration and the flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

# Values reported for the full-size model.  The desk defaults below scale
# widths, depth and batch size down so an epoch runs in well under a minute.
FULL_SIZE_DEFAULTS = {
    "K": 11,
    "N": 256,
    "H": 1024,
    "lstm_layers": 3,
    "batch_size": 64,
    "lam": 1000.0,
    "zeta": 1e-5,
    "l1": 30,
    "l2": 16,
    "kernel": 3,
    "image_size": 384,
}


@dataclass
class ModelConfig:
    K: int = 8
    N: int = 32
    H: int = 64
    C: int = 4
    B: int = 2
    fusion: str = "late"
    cell: str = "joint"
    lstm_layers: int = 1
    diagonal_fusion: bool = False
    lam: float = 1000.0
    zeta: float = 1e-5
    l1: int = 30
    l2: int = 16
    stride: int = 5
    lr: float = 0.02
    momentum: float = 0.9
    clip_norm: float = 1.0
    epochs: int = 20
    batch_size: int = 16
    clips_per_video: int = 0
    holdout: float = 0.2
    seed: int = 0
    pyramid: bool = True
    conv3d: bool = True
    conv3d_layers: int = 2
    kernel: int = 3
    head_width: int = 128
    regularizer: bool = True
    finetune_extractor: bool = False
    feature_norm: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ("K", "N", "H", "C", "B", "lstm_layers", "l1", "l2", "stride", "epochs",
                    "batch_size", "conv3d_layers", "kernel", "head_width")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.fusion not in ("early", "late"):
            raise ConfigError(f"fusion must be 'early' or 'late', got {self.fusion!r}")
        if self.cell not in ("joint", "standard"):
            raise ConfigError(f"cell must be 'joint' or 'standard', got {self.cell!r}")
        if self.B > 3:
            raise ConfigError(f"at most 3 branches are supported, got B={self.B}")
        if self.l2 > self.l1:
            raise ConfigError(f"L2={self.l2} exceeds L1={self.l1}")
        if self.pyramid and self.K % 2:
            raise ConfigError(f"spatial pyramid needs even K, got {self.K}")
        if self.kernel % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {self.kernel}")
        if self.lam < 0 or self.zeta < 0 or self.lr < 0:
            raise ConfigError("lam, zeta and lr must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0 <= self.holdout < 1:
            raise ConfigError(f"holdout must be in [0, 1), got {self.holdout}")
        if self.clips_per_video < 0 or self.clip_norm < 0:
            raise ConfigError("clips_per_video and clip_norm must be >= 0")

    @property
    def image_size(self) -> int:
        return 8 * self.K

    @property
    def effective_lam(self) -> float:
        return self.lam if self.regularizer else 0.0

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "ModelConfig | None" = None) -> "ModelConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
        return cls.from_mapping(values, base)

    @classmethod
    def from_mapping(cls, values: dict, base: "ModelConfig | None" = None) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {} if base is None else dataclasses.asdict(base)
        for key, value in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, types[key], value)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _coerce(key: str, kind, value):
    if not isinstance(value, str):
        return value
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            low = value.lower()
            if low in ("true", "on", "yes", "1"):
                return True
            if low in ("false", "off", "no", "0"):
                return False
            raise ValueError(value)
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind}") from None
    return value
