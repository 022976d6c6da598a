"""Run configuration: one flat key/value surface over every knob.

The on-disk format is UTF-8 ``key = value`` lines.  ``#`` starts a comment
(full-line or trailing), blank lines are ignored, and list-valued keys take
comma-separated entries.  Every key has a default; unknown keys are rejected
so typos fail loudly instead of silently training the wrong model.
"""

from __future__ import annotations

import os
import typing
from dataclasses import dataclass, fields, replace

from .errors import ContractError, ParseError
from .spatial import SpatialConfig
from .temporal import VARIANTS, TemporalConfig

__all__ = ["RunConfig", "parse_run_config", "serialize_run_config",
           "load_run_config", "apply_env_overrides", "override_config"]

PLAN_MODES = ("sequential", "shuffled")


@dataclass
class RunConfig:
    # model selection
    variant: str = "transvod"

    # temporal stack (0 / empty = per-variant default)
    stages: int = 0
    k_schedule: tuple[int, ...] = ()
    n_tdte: int = 1
    n_tqe: int = 3
    n_tdtd: int = 1
    n_ref: int = 4
    window: int = 4
    interval: int = 1
    plan: str = "sequential"
    frame_identity: bool = False
    d_hidden: int = 0

    # spatial model widths
    d: int = 64
    heads: int = 8
    points: int = 4
    n_ste: int = 2
    n_std: int = 2
    n_queries: int = 60
    n_classes: int = 4
    ffn_dim: int = 128

    # loss term weights
    lambda_cls: float = 2.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0

    # optimization
    lr: float = 1e-3
    lr_backbone: float = 1e-4
    weight_decay: float = 1e-4
    clip_norm: float = 0.1
    epochs_stage1: int = 7
    epochs_stage2: int = 7
    batch_size: int = 1
    max_steps: int = 0

    # run control
    seed: int = 0
    dataset: str = "data"
    deterministic: bool = True

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.plan not in PLAN_MODES:
            raise ContractError(f"plan must be one of {PLAN_MODES}, got {self.plan!r}")
        if self.window < 1 or self.interval < 1:
            raise ContractError("window and interval must be at least 1")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be at least 1, got {self.batch_size}")

    def spatial_config(self) -> SpatialConfig:
        return SpatialConfig(
            d=self.d, heads=self.heads, points=self.points, n_ste=self.n_ste,
            n_std=self.n_std, n_queries=self.n_queries,
            n_classes=self.n_classes, ffn_dim=self.ffn_dim,
        )

    def temporal_config(self) -> TemporalConfig:
        return TemporalConfig(
            variant=self.variant,
            stages=self.stages or None,
            k_schedule=self.k_schedule or None,
            n_tdte=self.n_tdte, n_tqe=self.n_tqe, n_tdtd=self.n_tdtd,
            n_ref=self.n_ref, window=self.window,
            d_hidden=self.d_hidden or None,
            frame_identity=self.frame_identity,
        )

    @property
    def loss_weights(self) -> tuple[float, float, float]:
        return (self.lambda_cls, self.lambda_l1, self.lambda_giou)


_TYPES = typing.get_type_hints(RunConfig)


def _parse_value(key: str, raw: str, kind, source, line_no: int):
    origin = typing.get_origin(kind)
    try:
        if origin is tuple:
            inner = typing.get_args(kind)[0]
            raw = raw.strip()
            if not raw:
                return ()
            return tuple(inner(part.strip()) for part in raw.split(","))
        if kind is bool:
            lowered = raw.strip().lower()
            if lowered not in ("true", "false"):
                raise ValueError(raw)
            return lowered == "true"
        return kind(raw.strip())
    except ValueError:
        raise ParseError(
            source, f"line {line_no}",
            f"bad value {raw.strip()!r} for key {key!r}"
        ) from None


def parse_run_config(text: str, source="<config>") -> RunConfig:
    """Parse ``key = value`` text into a RunConfig.

    Raises ParseError for syntax problems, unknown keys, bad values, or
    duplicate keys; model-level consistency problems surface as
    ContractError from the dataclass itself.
    """
    values = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(source, f"line {line_no}",
                             f"expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key not in _TYPES:
            raise ParseError(source, f"line {line_no}", f"unknown key {key!r}")
        if key in values:
            raise ParseError(source, f"line {line_no}", f"duplicate key {key!r}")
        values[key] = _parse_value(key, raw, _TYPES[key], source, line_no)
    return RunConfig(**values)


def serialize_run_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            text = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            text = "true" if value else "false"
        else:
            text = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


def load_run_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_run_config(fh.read(), source=path)


def apply_env_overrides(cfg: RunConfig) -> RunConfig:
    """STVOD_SEED in the environment beats the configured seed."""
    raw = os.environ.get("STVOD_SEED")
    if raw is not None:
        try:
            cfg.seed = int(raw)
        except ValueError:
            raise ParseError("<env>", "STVOD_SEED",
                             f"must be an integer, got {raw!r}") from None
    return cfg


def override_config(cfg: RunConfig, pairs: list[str],
                    source: str = "<override>") -> RunConfig:
    """Apply ``key=value`` override strings on top of an existing config."""
    values = {}
    for i, pair in enumerate(pairs, start=1):
        if "=" not in pair:
            raise ParseError(source, f"override {i}",
                             f"expected key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key not in _TYPES:
            raise ParseError(source, f"override {i}", f"unknown key {key!r}")
        values[key] = _parse_value(key, raw, _TYPES[key], source, i)
    return replace(cfg, **values)
