"""Run configuration: model + dataset settings and the flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .fields import SmoothingConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    levels: int = 5
    base_channels: int = 12
    dropout: float = 0.0
    T: int = 8
    smoothing: bool = True
    smoothing_kernel: int = 5
    smoothing_sigma: float = 2.0
    super_upsample: bool = True
    use_bulk: bool = True
    use_ft: bool = True
    use_grad_loss: bool = True
    beta: float = 10000.0
    grad_units: str = "normalized"
    prior_radius: int = 0  # 0 -> 30 * h / 144, rounded
    prior_thickness: int = 8
    lr: float = 1e-4
    batch: int = 5
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.T < 0:
            raise ConfigError(f"T must be >= 0, got {self.T}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.levels < 2:
            raise ConfigError("need at least 2 encoder levels")
        if self.grad_units not in ("normalized", "voxel"):
            raise ConfigError(f"grad_units must be 'normalized' or 'voxel', got {self.grad_units!r}")
        if not (self.use_bulk or self.use_ft):
            raise ConfigError("at least one of use_bulk / use_ft must be on")

    @property
    def smoothing_cfg(self) -> SmoothingConfig:
        return SmoothingConfig(self.smoothing_kernel, self.smoothing_sigma, self.smoothing)

    def radius_for(self, h: int) -> int:
        return self.prior_radius if self.prior_radius > 0 else int(round(30 * h / 144))


@dataclass
class DatasetConfig:
    h: int = 64
    w: int = 96
    n_train: int = 500
    n_val: int = 100
    n_test: int = 100
    radius_min: float = 10.0
    radius_max: float = 20.0
    thickness_min: float = 4.0
    thickness_max: float = 8.0
    noise_sigma: float = 0.05
    max_distractors: int = 3
    data_seed: int = 1234

    def __post_init__(self):
        if self.h % 16 or self.w % 16:
            raise ConfigError(f"frame {self.h}x{self.w} must be divisible by 16")
        if self.radius_min > self.radius_max or self.thickness_min > self.thickness_max:
            raise ConfigError("empty radius/thickness range")
        if self.thickness_max >= 2 * self.radius_min:
            raise ConfigError("thickest wall would fill the annulus")
        outer = self.radius_max + self.thickness_max / 2 + 2
        if 2 * outer > min(self.h, self.w):
            raise ConfigError(f"largest annulus (outer radius {outer - 2}) does not fit a {self.h}x{self.w} frame")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DatasetConfig = field(default_factory=DatasetConfig)
    sweep_T: str = "2,3,4,5,6,7,8,9,10,11,12,13,14,15,16"
    sweep_radii: str = "8,10,13,16,20"

    @property
    def T_values(self) -> list[int]:
        return [int(t) for t in self.sweep_T.split(",") if t.strip()]

    @property
    def radii(self) -> list[int]:
        return [int(r) for r in self.sweep_radii.split(",") if r.strip()]


def _sections(cfg: RunConfig):
    yield cfg.model
    yield cfg.data
    yield cfg


def _lookup(cfg: RunConfig) -> dict:
    table = {}
    for obj in _sections(cfg):
        for f in fields(obj):
            if f.name in ("model", "data"):
                continue
            table[f.name] = (obj, f)
    return table


def _coerce(raw: str, typ, key: str):
    raw = raw.strip()
    typ = {"int": int, "float": float, "bool": bool, "str": str}.get(typ, typ) if isinstance(typ, str) else typ
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def apply(cfg: RunConfig, pairs: dict[str, str]) -> RunConfig:
    """Return a copy of ``cfg`` with string ``pairs`` applied; unknown keys are rejected."""
    model = dataclasses.replace(cfg.model)
    data = dataclasses.replace(cfg.data)
    out = dataclasses.replace(cfg, model=model, data=data)
    table = _lookup(out)
    updates: dict[int, dict] = {}
    for key, raw in pairs.items():
        if key not in table:
            raise ConfigError(f"unknown config key {key!r}")
        obj, f = table[key]
        updates.setdefault(id(obj), {"obj": obj, "vals": {}})["vals"][key] = _coerce(raw, f.type, key)
    for entry in updates.values():
        obj = entry["obj"]
        for k, v in entry["vals"].items():
            setattr(obj, k, v)
    # re-run validation on the touched sections
    out.model = ModelConfig(**dataclasses.asdict(out.model))
    out.data = DatasetConfig(**dataclasses.asdict(out.data))
    return out


def parse_text(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    pairs = parse_text(Path(path).read_text(encoding="utf-8")) if path else {}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    return apply(RunConfig(), pairs)


def dump(cfg: RunConfig) -> str:
    lines = []
    for title, obj in (("model", cfg.model), ("dataset", cfg.data), ("experiments", cfg)):
        lines.append(f"# {title}")
        for f in fields(obj):
            if f.name in ("model", "data"):
                continue
            v = getattr(obj, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
