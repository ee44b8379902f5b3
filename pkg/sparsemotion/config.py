"""Flat key-value run configuration.

Values are merged in order: built-in defaults, ``conf/defaults.yaml`` (when
present next to the package), a ``--config`` YAML file, then explicit
overrides (CLI flags). Keys are flat; each one maps onto a field of one of
the frozen sections below.
"""

from __future__ import annotations

import dataclasses
import logging
import os
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from sparsemotion.errors import ValidationError

logger = logging.getLogger(__name__)

DEFAULTS_PATH = Path(__file__).resolve().parent.parent / "conf" / "defaults.yaml"
STAGES = ("pretrain", "s1", "s2", "interp")


@dataclass(frozen=True)
class BackboneConfig:
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_model: int = 128
    n_heads: int = 4
    d_ffn: int = 256
    max_positions: int = 512
    rel_buckets: int = 32
    n_experts: int = 4
    top_k: int = 1
    router_init_std: float = 0.02
    use_position_bias: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValidationError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValidationError(f"top_k must be in [1, n_experts={self.n_experts}], got {self.top_k}")


@dataclass(frozen=True)
class InterpConfig:
    d_model: int = 64
    n_temporal_layers: int = 2
    n_part_layers: int = 1
    n_heads: int = 4
    d_ffn: int = 128
    max_offset: int = 32
    lambda_v: float = 1e-3
    lambda_a: float = 1e-4
    label_smoothing: float = 0.1
    tie_parts: bool = False

    def __post_init__(self):
        if self.lambda_v < 0 or self.lambda_a < 0:
            raise ValidationError("lambda_v and lambda_a must be non-negative")
        if self.d_model % self.n_heads:
            raise ValidationError(f"interp_d_model {self.d_model} is not divisible by interp_heads {self.n_heads}")


@dataclass(frozen=True)
class RunConfig:
    stage: str = "pretrain"
    steps: int = 200
    seed: int = 0
    tau: float = 0.5
    lambda_moe: float = 0.01
    history_len: int = 10
    chunk_len: int = 5
    stride: int = 6
    window: int = 20
    lr: float = 1e-4
    wd: float = 0.05
    batch: int = 8
    label_smoothing: float = 0.1
    short_context_prob: float = 0.3
    audio_variants: int = 5
    max_grad_norm: float = 1.0
    log_every: int = 10
    checkpoint_every: int = 0
    prefetch: int = 2

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValidationError(f"unknown stage '{self.stage}', expected one of {STAGES}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValidationError(f"tau must be in [0, 1], got {self.tau}")
        for name in ("steps", "history_len", "chunk_len", "stride", "window", "batch", "audio_variants"):
            if getattr(self, name) < (0 if name in ("steps", "history_len") else 1):
                raise ValidationError(f"{name} out of range: {getattr(self, name)}")
        if not 0.0 <= self.short_context_prob <= 1.0:
            raise ValidationError("short_context_prob must be in [0, 1]")

    @property
    def effective_lambda_moe(self) -> float:
        """The auxiliary weight is forced to 0 before upcycling."""
        return 0.0 if self.stage == "pretrain" else self.lambda_moe


@dataclass(frozen=True)
class Settings:
    run: RunConfig = field(default_factory=RunConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    interp: InterpConfig = field(default_factory=InterpConfig)

    def to_flat(self) -> dict[str, Any]:
        flat = {}
        for key, (section, name) in KEY_MAP.items():
            flat[key] = getattr(getattr(self, section), name)
        return flat


# flat key -> (section, field)
KEY_MAP: dict[str, tuple[str, str]] = {
    **{f.name: ("backbone", f.name) for f in dataclasses.fields(BackboneConfig)},
    "interp_d_model": ("interp", "d_model"),
    "interp_temporal_layers": ("interp", "n_temporal_layers"),
    "interp_part_layers": ("interp", "n_part_layers"),
    "interp_heads": ("interp", "n_heads"),
    "interp_d_ffn": ("interp", "d_ffn"),
    "interp_max_offset": ("interp", "max_offset"),
    "lambda_v": ("interp", "lambda_v"),
    "lambda_a": ("interp", "lambda_a"),
    "tie_parts": ("interp", "tie_parts"),
    **{f.name: ("run", f.name) for f in dataclasses.fields(RunConfig)},
    "P": ("run", "history_len"),
    "N": ("run", "chunk_len"),
}
del KEY_MAP["history_len"], KEY_MAP["chunk_len"]

# Both networks read the run-level smoothing value.
_SHARED = {"label_smoothing": ("interp", "label_smoothing")}


def _field_type(section: str, name: str) -> type:
    cls = {"run": RunConfig, "backbone": BackboneConfig, "interp": InterpConfig}[section]
    hint = {f.name: f.type for f in dataclasses.fields(cls)}[name]
    return {"int": int, "float": float, "bool": bool, "str": str}[str(hint)]


def _coerce(key: str, value: Any, kind: type) -> Any:
    if kind is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
    elif kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
    elif kind is float:
        if isinstance(value, int | float) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
    elif kind is str and isinstance(value, str):
        return value
    raise ValidationError(f"config key '{key}' expects {kind.__name__}, got {value!r}")


def read_yaml(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ValidationError(f"config file {path} must hold a flat mapping")
    logger.debug("Loaded config %s (%d keys)", path, len(data))
    return data


def build_settings(values: Mapping[str, Any]) -> Settings:
    sections: dict[str, dict[str, Any]] = {"run": {}, "backbone": {}, "interp": {}}
    for key, value in values.items():
        if key not in KEY_MAP:
            raise ValidationError(f"unknown config key '{key}'")
        section, name = KEY_MAP[key]
        coerced = _coerce(key, value, _field_type(section, name))
        sections[section][name] = coerced
        if key in _SHARED:
            shared_section, shared_name = _SHARED[key]
            sections[shared_section][shared_name] = coerced
    return Settings(
        run=RunConfig(**sections["run"]),
        backbone=BackboneConfig(**sections["backbone"]),
        interp=InterpConfig(**sections["interp"]),
    )


def load_settings(
    config_path: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    defaults_path: Path | None = DEFAULTS_PATH,
) -> Settings:
    """Merge defaults, an optional YAML file and explicit overrides."""
    merged: dict[str, Any] = {}
    if defaults_path is not None and defaults_path.exists():
        merged.update(read_yaml(defaults_path))
    if config_path is not None:
        merged.update(read_yaml(config_path))
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_settings(merged)


def settings_from_flat(flat: Mapping[str, Any]) -> Settings:
    return build_settings(dict(flat))


def worker_count() -> int:
    """Worker pool size, capped by ``UMO_THREADS`` when set."""
    raw = os.environ.get("UMO_THREADS")
    if raw is None:
        return max(1, min(8, os.cpu_count() or 1))
    try:
        value = int(raw)
    except ValueError as exc:
        raise ValidationError(f"UMO_THREADS must be an integer, got {raw!r}") from exc
    return max(1, value)
