"""Study configuration: defaults, a YAML file, then command-line flags (last wins)."""

from __future__ import annotations

import argparse
import dataclasses
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import yaml

from .offline_metrics import table_catalogue
from .online_scoring import DEFAULT_PENALTIES, EVENT_KINDS, PRIMARY_ONLINE
from .uncertainty import DEFAULT_BASE_METRICS, DEFAULT_GAMMA_GRID, ESTIMATORS, TARGETS


class ConfigError(ValueError):
    pass


CATALOGUE_NAMES = tuple(m.name for m in table_catalogue())


@dataclass
class StudyConfig:
    """Every key is also a ``--flag`` (underscores become dashes)."""

    # inputs and outputs
    out: str = "study"
    study: Optional[str] = None  # study directory to read; defaults to ``out``
    tracks: Optional[str] = None  # track file; bundled tracks when unset
    policies: Optional[str] = None  # policy family file; bundled family when unset
    dataset: Optional[str] = None  # score-offline input
    episodes: Optional[str] = None  # score-online input
    uwe_config: Optional[str] = None  # frozen UWE config; fit when unset
    # simulation
    seed: int = 42
    jobs: int = 1
    stride: int = 5
    waypoints: int = 4
    # offline metrics
    catalogue: list[str] = field(default_factory=lambda: list(CATALOGUE_NAMES))
    qce_sigma: float = 0.5
    tre_lambda: float = 0.1
    uw_gamma: float = 1.0
    # uncertainty and UWE
    uncertainty_target: Optional[str] = None
    estimator: str = "mc_samples"
    ensemble_members: int = 5
    uncertainty_source: str = "per_policy"
    base_metrics: list[str] = field(default_factory=lambda: list(DEFAULT_BASE_METRICS))
    gamma_grid: list[float] = field(default_factory=lambda: list(DEFAULT_GAMMA_GRID))
    holdout: float = 0.3
    fit_alpha: float = 0.05
    # online scoring
    penalties: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_PENALTIES))
    online_metrics: list[str] = field(default_factory=lambda: list(PRIMARY_ONLINE))
    # correlation
    primary_online: str = "driving_score"
    bootstrap: int = 1000
    ci_level: float = 0.95
    ci_stat: str = "pearson"
    svg: bool = False

    def validate(self) -> "StudyConfig":
        for key in ("tracks", "policies", "dataset", "episodes", "uwe_config", "study"):
            p = getattr(self, key)
            if p is not None and not Path(p).exists():
                raise ConfigError(f"{key}: path does not exist: {p}")
        unknown = [m for m in self.catalogue if m not in CATALOGUE_NAMES]
        if unknown or not self.catalogue:
            raise ConfigError(f"catalogue: unknown or empty metric selection {unknown}")
        if self.uncertainty_target is not None and self.uncertainty_target not in TARGETS:
            raise ConfigError(f"uncertainty_target must be one of {TARGETS}")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}")
        if self.estimator == "ensemble" and self.ensemble_members < 2:
            raise ConfigError("ensemble estimator needs ensemble_members >= 2")
        if not (self.uncertainty_source == "per_policy" or self.uncertainty_source.startswith("fixed:")):
            raise ConfigError("uncertainty_source must be 'per_policy' or 'fixed:<policy_id>'")
        for k in self.penalties:
            if k not in EVENT_KINDS:
                raise ConfigError(f"penalties: unknown event kind {k!r}")
        if any(not 0 < v <= 1 for v in self.penalties.values()):
            raise ConfigError("penalties must lie in (0, 1]")
        if not self.gamma_grid or any(g < 0 for g in self.gamma_grid):
            raise ConfigError("gamma_grid must be a non-empty list of non-negative numbers")
        if not 0 <= self.holdout < 1:
            raise ConfigError("holdout must be in [0, 1)")
        if self.jobs < 1 or self.stride < 1 or self.waypoints < 0:
            raise ConfigError("jobs and stride must be >= 1, waypoints >= 0")
        if self.bootstrap < 100:
            raise ConfigError("bootstrap must be >= 100")
        if not 0 < self.ci_level < 1:
            raise ConfigError("ci_level must be in (0, 1)")
        if self.ci_stat not in ("pearson", "spearman"):
            raise ConfigError("ci_stat must be 'pearson' or 'spearman'")
        self.primary_online = resolve_online_name(self.primary_online, self.online_metrics)
        return self

    @property
    def study_dir(self) -> Path:
        return Path(self.study if self.study is not None else self.out)


def resolve_online_name(name: str, names: list[str]) -> str:
    """Exact name, or the unique online metric it is a prefix of (``success`` -> ``success_rate``)."""
    if name in names:
        return name
    hits = [n for n in names if n.startswith(name)]
    if len(hits) == 1:
        return hits[0]
    raise ConfigError(f"primary_online {name!r} matches {hits or 'no'} online metric(s)")


_HINTS = typing.get_type_hints(StudyConfig)


def _base_type(tp) -> Any:
    args = [a for a in typing.get_args(tp) if a is not type(None)]
    if typing.get_origin(tp) is typing.Union and len(args) == 1:
        return args[0]
    return tp


def _coerce(key: str, value: Any) -> Any:
    tp = _base_type(_HINTS[key])
    if value is None:
        if _HINTS[key] is not tp:
            return None
        raise ConfigError(f"{key}: value required")
    origin = typing.get_origin(tp)
    try:
        if origin is list:
            (item,) = typing.get_args(tp)
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            if not isinstance(value, list):
                raise TypeError("expected a list")
            return [item(v.strip()) if isinstance(v, str) else item(v) for v in value]
        if origin is dict:
            if isinstance(value, str):
                pairs = [p.split("=", 1) for p in value.split(",") if p.strip()]
                value = {k.strip(): v for k, v in pairs}
            if not isinstance(value, dict):
                raise TypeError("expected a mapping")
            return {str(k): float(v) for k, v in value.items()}
        if tp is bool:
            if isinstance(value, bool):
                return value
            raise TypeError("expected true or false")
        if tp is int and isinstance(value, float) and not value.is_integer():
            raise TypeError("expected an integer")
        if tp in (int, float) and isinstance(value, bool):
            raise TypeError(f"expected {tp.__name__}")
        return tp(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: bad value {value!r} ({exc})") from None


def load_config_file(path: str | Path) -> dict[str, Any]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file does not exist: {p}")
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: invalid YAML: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return data


def build_config(file_values: dict[str, Any], overrides: dict[str, Any]) -> StudyConfig:
    """Defaults, then file values, then overrides; unknown keys are rejected."""
    names = {f.name for f in fields(StudyConfig)}
    cfg = StudyConfig()
    for source in (file_values, overrides):
        unknown = sorted(set(source) - names)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        for k, v in source.items():
            setattr(cfg, k, _coerce(k, v))
    return cfg.validate()


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One ``--flag`` per config key; unset flags stay out of the namespace."""
    for f in fields(StudyConfig):
        flag = "--" + f.name.replace("_", "-")
        tp = _base_type(_HINTS[f.name])
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if tp is bool:
            parser.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=argparse.SUPPRESS, help=f"(default: {default})")
        else:
            shown = ",".join(map(str, default)) if isinstance(default, list) else default
            if isinstance(default, dict):
                shown = ",".join(f"{k}={v}" for k, v in default.items())
            parser.add_argument(flag, dest=f.name, metavar=f.name.upper(), default=argparse.SUPPRESS, help=f"(default: {shown})")


def config_to_obj(cfg: StudyConfig) -> dict[str, Any]:
    return dataclasses.asdict(cfg)
