"""Pipeline configuration: defaults, validation, presets and file loading."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import yaml

logger = logging.getLogger(__name__)

SCHEDULES = ("smoothing", "ssrs", "alrs", "multistep", "cosine", "constant")
INITS = ("real", "patch_concat", "gaussian")
FLATNESS_KINDS = ("logits", "stats", "sam", "none")
LABEL_MODES = ("static", "per_epoch_cached")
LABEL_SPACES = ("prob", "logit")
SYNTH_LR_SCHEDULES = ("cosine", "constant")


class ConfigError(ValueError):
    """Raised for unparsable config files or out-of-range fields."""

    def __init__(self, message: str, field_name: str | None = None):
        super().__init__(message)
        self.field_name = field_name


@dataclass(frozen=True)
class CondenseConfig:
    # matching / flatness
    alpha: float = 0.5
    beta: float = 0.99
    tau: float = 4.0
    flatness_weight: float = 0.25
    flatness: str = "logits"
    sam_rho: float = 0.05
    # synthesis
    ipc: int = 10
    init: str = "patch_concat"
    patch_n: int = 4
    synth_iters: int = 2000
    synth_batch: int = 80
    synth_lr: float = 0.05
    synth_lr_schedule: str = "cosine"
    crop_scale_min: float = 0.5
    layer_whitelist: tuple[str, ...] | None = None
    # soft labels
    label_mode: str = "static"
    label_space: str = "prob"
    label_ensemble: str = "full"
    label_observers: str | None = None
    # post-evaluation
    schedule: str = "smoothing"
    zeta: float = 2.0
    eval_epochs: int = 300
    eval_batch: int = 100
    eval_lr: float = 0.001
    eval_weight_decay: float = 0.01
    eval_ema_rate: float = 0.99
    eval_crop_scale_min: float = 0.08
    eval_every: int = 1
    alrs_gamma: float = 0.997
    alrs_h1: float = 0.02
    alrs_h2: float = 0.02
    multistep_gamma: float = 0.5
    multistep_milestones: tuple[int, ...] = (800, 900, 950)
    # pipeline wiring
    dataset: str = "digits32"
    observers: str = "convnet-trio"
    student: str = "convnet-w32-d3"
    observer_epochs: int = 15
    seed: int = 0

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


FIELD_NAMES = {f.name for f in dataclasses.fields(CondenseConfig)}

# Cumulative design-choice presets, from the G-VBSM-like baseline (A) to the full recipe (G).
PRESETS: dict[str, dict[str, Any]] = {
    "A": dict(init="gaussian", alpha=1.0, flatness="none", flatness_weight=0.0,
              schedule="cosine", zeta=1.0, crop_scale_min=0.08, eval_ema_rate=0.0,
              eval_batch=100, label_ensemble="full"),
}
PRESETS["B"] = {**PRESETS["A"], "init": "patch_concat"}
PRESETS["C"] = {**PRESETS["B"], "schedule": "smoothing", "zeta": 2.0}
PRESETS["D"] = {**PRESETS["C"], "flatness": "logits", "flatness_weight": 0.25}
PRESETS["E"] = {**PRESETS["D"], "eval_batch": 25}
PRESETS["F"] = {**PRESETS["E"], "alpha": 0.5}
PRESETS["G"] = {**PRESETS["F"], "crop_scale_min": 0.5, "eval_ema_rate": 0.99,
                "label_ensemble": "lite"}


def _check(cond: bool, name: str, bound: str, value: Any) -> None:
    if not cond:
        raise ConfigError(f"{name}={value!r} out of range: expected {bound}", name)


def _choice(name: str, value: Any, options: tuple[str, ...]) -> None:
    if value not in options:
        raise ConfigError(f"{name}={value!r} must be one of {options}", name)


def validate(cfg: CondenseConfig) -> CondenseConfig:
    """Check every field range; returns a normalized copy (tuples, floats)."""
    c = cfg
    _check(0.0 <= c.alpha <= 1.0, "alpha", "[0, 1]", c.alpha)
    _check(0.0 < c.beta < 1.0, "beta", "(0, 1)", c.beta)
    _check(c.tau > 0, "tau", "> 0", c.tau)
    _check(c.zeta > 0, "zeta", "> 0", c.zeta)
    _check(c.flatness_weight >= 0, "flatness_weight", ">= 0", c.flatness_weight)
    _check(c.sam_rho >= 0, "sam_rho", ">= 0", c.sam_rho)
    _check(c.ipc >= 1, "ipc", ">= 1", c.ipc)
    _check(c.patch_n in (1, 4), "patch_n", "1 or 4", c.patch_n)
    _check(c.synth_iters >= 1, "synth_iters", ">= 1", c.synth_iters)
    _check(c.synth_batch >= 1, "synth_batch", ">= 1", c.synth_batch)
    _check(c.synth_lr >= 0, "synth_lr", ">= 0", c.synth_lr)
    _check(0.0 < c.crop_scale_min <= 1.0, "crop_scale_min", "(0, 1]", c.crop_scale_min)
    _check(0.0 < c.eval_crop_scale_min <= 1.0, "eval_crop_scale_min", "(0, 1]",
           c.eval_crop_scale_min)
    _check(c.eval_epochs >= 1, "eval_epochs", ">= 1", c.eval_epochs)
    _check(c.eval_batch >= 1, "eval_batch", ">= 1", c.eval_batch)
    _check(c.eval_lr > 0, "eval_lr", "> 0", c.eval_lr)
    _check(c.eval_weight_decay >= 0, "eval_weight_decay", ">= 0", c.eval_weight_decay)
    _check(0.0 <= c.eval_ema_rate < 1.0, "eval_ema_rate", "[0, 1)", c.eval_ema_rate)
    _check(c.eval_every >= 1, "eval_every", ">= 1", c.eval_every)
    _check(0.0 < c.alrs_gamma <= 1.0, "alrs_gamma", "(0, 1]", c.alrs_gamma)
    _check(c.alrs_h1 >= 0, "alrs_h1", ">= 0", c.alrs_h1)
    _check(c.alrs_h2 >= 0, "alrs_h2", ">= 0", c.alrs_h2)
    _check(0.0 < c.multistep_gamma <= 1.0, "multistep_gamma", "(0, 1]", c.multistep_gamma)
    _check(c.observer_epochs >= 0, "observer_epochs", ">= 0", c.observer_epochs)
    for name in FIELD_NAMES:
        v = getattr(c, name)
        if isinstance(v, float) and not math.isfinite(v):
            raise ConfigError(f"{name} must be finite", name)
    _choice("schedule", c.schedule, SCHEDULES)
    _choice("init", c.init, INITS)
    _choice("flatness", c.flatness, FLATNESS_KINDS)
    _choice("label_mode", c.label_mode, LABEL_MODES)
    _choice("label_space", c.label_space, LABEL_SPACES)
    _choice("synth_lr_schedule", c.synth_lr_schedule, SYNTH_LR_SCHEDULES)
    milestones = tuple(int(m) for m in c.multistep_milestones)
    if any(b <= a for a, b in zip(milestones, milestones[1:])):
        raise ConfigError("multistep_milestones must be strictly increasing",
                          "multistep_milestones")
    whitelist = None if c.layer_whitelist is None else tuple(c.layer_whitelist)
    if c.flatness_weight >= 2.5:
        logger.warning("flatness_weight=%s is in the range where synthesis quality "
                       "is known to degrade", c.flatness_weight)
    return dataclasses.replace(
        c,
        multistep_milestones=milestones,
        layer_whitelist=whitelist,
        alpha=float(c.alpha), beta=float(c.beta), tau=float(c.tau), zeta=float(c.zeta),
        flatness_weight=float(c.flatness_weight),
    )


_DEFAULTS = CondenseConfig()


def _coerce(name: str, value: Any) -> Any:
    default = getattr(_DEFAULTS, name)
    try:
        if isinstance(value, bool) and not isinstance(default, bool):
            raise TypeError
        if isinstance(default, float):
            return float(value)
        if isinstance(default, int):
            if float(value) != int(value):
                raise TypeError
            return int(value)
        if name == "label_observers":
            return None if value is None else str(value)
        if isinstance(default, tuple) or name == "layer_whitelist":
            return None if value is None else tuple(value)
        if isinstance(default, str):
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}={value!r} has the wrong type "
                          f"(expected {type(default).__name__})", name) from None
    return value


def make_config(overrides: Mapping[str, Any] | None = None, preset: str | None = None
                ) -> CondenseConfig:
    """Defaults < preset < overrides, then validated."""
    values: dict[str, Any] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}",
                              "preset")
        values.update(PRESETS[preset])
    for k, v in (overrides or {}).items():
        if k not in FIELD_NAMES:
            raise ConfigError(f"unknown config field {k!r}", k)
        if v is None and k not in ("layer_whitelist", "label_observers"):
            continue
        values[k] = _coerce(k, v)
    try:
        cfg = CondenseConfig(**values)
    except TypeError as exc:  # pragma: no cover - dataclass guards field names above
        raise ConfigError(str(exc)) from exc
    return validate(cfg)


def read_config_file(path: str | Path) -> dict[str, Any]:
    """Parse a YAML (or JSON) config file into a raw mapping."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return raw


def load_config(path: str | Path, overrides: Mapping[str, Any] | None = None
                ) -> CondenseConfig:
    """Load a config file; ``overrides`` (e.g. CLI flags, ``None`` = unset) win."""
    raw = read_config_file(path)
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    preset = raw.pop("preset", None)
    return make_config(raw, preset=preset)


def bundled_config_path(name: str) -> Path:
    """Path of a config shipped with the package (``toy1d``, ``digits32``, ``cifar10``)."""
    p = Path(__file__).parent / "configs" / f"{name}.yaml"
    if not p.exists():
        raise ConfigError(f"no bundled config named {name!r}")
    return p


def default_cache_root() -> Path:
    import os
    return Path(os.environ.get("EDC_CACHE_DIR", Path.home() / ".cache" / "edclab"))


__all__ = [
    "CondenseConfig", "ConfigError", "PRESETS", "validate", "make_config",
    "load_config", "read_config_file", "bundled_config_path", "default_cache_root",
]

