"""Epistemic uncertainty from prediction samples and the uncertainty-weighted error.

The per-record uncertainty ``u_i`` is the population variance of the K
predictions (MC-dropout passes or ensemble members), averaged over the output
dimensions of the chosen target. The uncertainty-weighted error combines
several base losses, each aggregated with weights ``u_i ** gamma``, using
non-negative weights ``beta`` that sum to one.
"""

from __future__ import annotations

import hashlib
import logging
import math
import warnings
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import stats

from .correlation import DegenerateSeriesError, pearson
from .datamodel import Dataset, DatasetError, PredictionRecord, sample_mean
from .offline_metrics import LossKernel, MetricError, WeightScheme, aggregate, table_catalogue

logger = logging.getLogger(__name__)

TARGETS = ("steer", "action", "waypoints")
ESTIMATORS = ("mc_samples", "ensemble")
DEFAULT_GAMMA_GRID = (0.25, 0.5, 1.0, 2.0)
DEFAULT_BASE_METRICS = ("steer_mae", "steer_mse", "action_mae", "action_mse")


class FitError(ValueError):
    """The weight fit cannot be performed on the given table."""


def base_kernels() -> dict[str, LossKernel]:
    """Uniformly weighted catalogue entries usable as UWE base losses."""
    return {m.name: m.kernel for m in table_catalogue() if m.weights.kind == "uniform"}


def default_target(dataset: Dataset) -> str:
    return "waypoints" if dataset.has_waypoints else "steer"


# -- variance kernels ------------------------------------------------------------


def _population_variance(samples: np.ndarray) -> np.ndarray:
    """Variance over axis 1 with divisor K; exactly zero for identical samples.

    Deviations are taken from the first sample before the two-pass formula so
    constant inputs never pick up rounding residue from the mean.
    """
    d = samples - samples[:, :1]
    m = d.mean(axis=1, keepdims=True)
    return ((d - m) ** 2).mean(axis=1)


def _target_columns(actions: np.ndarray, waypoints: Optional[np.ndarray], target: str) -> np.ndarray:
    """Stack the output dimensions of ``target`` into shape (N, K, D)."""
    if target == "steer":
        return actions[..., 0:1]
    if target == "action":
        return np.stack([actions[..., 0], actions[..., 1] - actions[..., 2]], axis=-1)
    if waypoints is None:
        raise MetricError("uncertainty target 'waypoints' on a control-only dataset")
    n, k = waypoints.shape[:2]
    return waypoints.reshape(n, k, -1)


def mc_variance(record: PredictionRecord, target: str = "steer") -> float:
    if target not in TARGETS:
        raise ValueError(f"unknown uncertainty target {target!r}")
    if record.K == 1:
        warnings.warn(f"record {record.record_id!r}: K = 1, uncertainty is zero", stacklevel=2)
    actions = np.array([[a.as_tuple() for a in record.samples_action]], dtype=float)
    wp = None
    if record.samples_waypoints is not None:
        wp = np.array([[p.points for p in record.samples_waypoints]], dtype=float)
    elif target == "waypoints":
        raise MetricError(f"record {record.record_id!r}: uncertainty target 'waypoints' needs waypoint samples")
    cols = _target_columns(actions, wp, target)
    return float(_population_variance(cols)[0].mean())


@dataclass(frozen=True)
class UncertaintyEstimate:
    per_record: np.ndarray
    estimator: str = "mc_samples"
    target: str = "steer"
    record_ids: tuple[str, ...] = ()

    def __post_init__(self):
        u = np.asarray(self.per_record, dtype=float)
        if u.ndim != 1:
            raise ValueError("per_record must be one-dimensional")
        if not np.all(np.isfinite(u)) or np.any(u < 0):
            raise ValueError("uncertainty values must be finite and non-negative")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        u.setflags(write=False)
        object.__setattr__(self, "per_record", u)

    def __len__(self) -> int:
        return len(self.per_record)

    def aligned_to(self, dataset: Dataset) -> np.ndarray:
        if len(self) != len(dataset):
            raise MetricError(f"uncertainty estimate has {len(self)} entries for {len(dataset)} records")
        if self.record_ids and self.record_ids != tuple(r.record_id for r in dataset.records):
            raise MetricError("uncertainty estimate is not aligned with the dataset records")
        return self.per_record


def _variance_from_arrays(actions: np.ndarray, waypoints: Optional[np.ndarray], target: str) -> np.ndarray:
    return _population_variance(_target_columns(actions, waypoints, target)).mean(axis=-1)


def estimate_uncertainty(dataset: Dataset, target: Optional[str] = None) -> UncertaintyEstimate:
    """MC-sample variance for every record of ``dataset``."""
    target = target or default_target(dataset)
    if target not in TARGETS:
        raise ValueError(f"unknown uncertainty target {target!r}")
    if dataset.header.K == 1:
        warnings.warn("K = 1: every uncertainty value is zero", stacklevel=2)
    a = dataset.arrays
    u = _variance_from_arrays(a.samples, a.sample_wp, target)
    return UncertaintyEstimate(u, "mc_samples", target, tuple(r.record_id for r in dataset.records))


def ensemble_uncertainty(members: Sequence[Dataset], target: Optional[str] = None) -> UncertaintyEstimate:
    """Variance across ensemble members' point predictions, record by record.

    Each member contributes its executed action (and mean waypoint plan); the
    variance kernel is the one used for MC samples.
    """
    if len(members) < 1:
        raise ValueError("ensemble needs at least one member")
    ref = members[0]
    ids = tuple(r.record_id for r in ref.records)
    for m in members[1:]:
        if tuple(r.record_id for r in m.records) != ids:
            raise DatasetError("ensemble members must cover the same records in the same order")
    target = target or default_target(ref)
    if len(members) == 1:
        warnings.warn("ensemble of one member: every uncertainty value is zero", stacklevel=2)
    actions = np.stack([m.arrays.executed for m in members], axis=1)
    wp = None
    if all(m.has_waypoints for m in members):
        wp = np.stack([sample_mean(m.arrays.sample_wp, 1) for m in members], axis=1)
    u = _variance_from_arrays(actions, wp, target)
    return UncertaintyEstimate(u, "ensemble", target, ids)


# -- UWE ---------------------------------------------------------------------------


@dataclass
class UweConfig:
    gamma: float
    betas: dict[str, float]
    target: str = "steer"
    estimator: str = "mc_samples"

    def __post_init__(self):
        if not math.isfinite(self.gamma):
            raise ValueError("gamma must be finite")
        if not self.betas:
            raise ValueError("UWE needs at least one base metric")
        known = base_kernels()
        for name, b in self.betas.items():
            if name not in known:
                raise ValueError(f"unknown base metric {name!r}")
            if not (b >= 0 and math.isfinite(b)):
                raise ValueError(f"beta for {name!r} must be finite and non-negative")
        total = math.fsum(self.betas.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"betas must sum to 1, got {total}")

    @property
    def base_metrics(self) -> dict[str, LossKernel]:
        known = base_kernels()
        return {name: known[name] for name in self.betas}

    def to_text(self) -> str:
        lines = [
            f"gamma = {format(self.gamma, '.9g')}",
            f"target = {self.target}",
            f"estimator = {self.estimator}",
        ]
        for name, b in zip(self.betas, _decimal_betas(list(self.betas.values()))):
            lines.append(f"beta.{name} = {b:f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "UweConfig":
        values: dict[str, str] = {}
        for no, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {no}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            values[k] = v
        if "gamma" not in values:
            raise ValueError("UWE config needs 'gamma'")
        betas = {k[len("beta."):]: float(v) for k, v in values.items() if k.startswith("beta.")}
        unknown = [k for k in values if not k.startswith("beta.") and k not in ("gamma", "target", "estimator")]
        if unknown:
            raise ValueError(f"unknown UWE config key(s) {unknown}")
        return cls(
            gamma=float(values["gamma"]),
            betas=betas,
            target=values.get("target", "steer"),
            estimator=values.get("estimator", "mc_samples"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "UweConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _decimal_betas(betas: Sequence[float], places: int = 9) -> list[Decimal]:
    """Round to ``places`` decimals so that the printed values sum to exactly 1."""
    q = Decimal(1).scaleb(-places)
    out = [Decimal(repr(float(b))).quantize(q, rounding=ROUND_HALF_EVEN) for b in betas]
    out[int(np.argmax(betas))] += Decimal(1) - sum(out)
    return [d.normalize() if d != 0 else Decimal(0) for d in out]


def uwe_components(
    dataset: Dataset,
    kernels: Mapping[str, LossKernel],
    gamma: float,
    estimate: UncertaintyEstimate,
    normalized: bool = True,
) -> dict[str, float]:
    """Each base loss aggregated with weights ``u ** gamma``."""
    u = estimate.aligned_to(dataset)
    w = WeightScheme.uncertainty(gamma)
    return {name: aggregate(dataset, k, w, u, normalized) for name, k in kernels.items()}


def uwe(dataset: Dataset, cfg: UweConfig, estimate: UncertaintyEstimate, normalized: bool = True) -> float:
    comps = uwe_components(dataset, cfg.base_metrics, cfg.gamma, estimate, normalized)
    return math.fsum(cfg.betas[name] * comps[name] for name in cfg.betas)


# -- fitting -----------------------------------------------------------------------


@dataclass
class FitDiagnostics:
    gamma: float
    in_sample_pearson: float
    held_out_pearson: Optional[float]
    per_gamma_pearson: dict[float, float]
    f_pvalue: float
    included: list[str]
    dropped: dict[str, str]
    train_ids: list[str]
    held_out_ids: list[str]
    flags: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "in_sample_pearson": self.in_sample_pearson,
            "held_out_pearson": self.held_out_pearson,
            "per_gamma_pearson": {format(g, ".9g"): r for g, r in self.per_gamma_pearson.items()},
            "f_pvalue": self.f_pvalue,
            "included": self.included,
            "dropped": self.dropped,
            "train_ids": self.train_ids,
            "held_out_ids": self.held_out_ids,
            "flags": self.flags,
        }


def split_policies(policy_ids: Sequence[str], holdout_fraction: float = 0.3) -> tuple[list[str], list[str]]:
    """Deterministic policy-level split ordered by a hash of the id."""
    if not 0.0 <= holdout_fraction < 1.0:
        raise ValueError("holdout_fraction must be in [0, 1)")
    order = sorted(policy_ids, key=lambda p: (hashlib.sha256(p.encode()).hexdigest(), p))
    n_train = len(order) - int(math.floor(len(order) * holdout_fraction))
    return sorted(order[:n_train]), sorted(order[n_train:])


@dataclass
class _GammaFit:
    included: list[int]
    coef: np.ndarray  # raw-scale coefficients of the included columns
    pearson: float
    f_pvalue: float
    dropped: dict[int, str]


def _standardize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    return (x - mu) / sd, sd


def _independent_columns(z: np.ndarray, cols: list[int]) -> tuple[list[int], list[int]]:
    """Greedy left-to-right selection of linearly independent standardized columns."""
    kept: list[int] = []
    dropped: list[int] = []
    n = z.shape[0]
    for c in cols:
        trial = np.column_stack([np.ones(n)] + [z[:, j] for j in kept + [c]])
        s = np.linalg.svd(trial, compute_uv=False)
        if s[-1] <= max(trial.shape) * np.finfo(float).eps * s[0] * 1e3:
            dropped.append(c)
        else:
            kept.append(c)
    return kept, dropped


def _fit_one_gamma(x: np.ndarray, y: np.ndarray, names: Sequence[str]) -> _GammaFit:
    n_pol, n_met = x.shape
    dropped: dict[int, str] = {}
    sd_all = x.std(axis=0)
    active = []
    for j in range(n_met):
        if sd_all[j] == 0 or not np.isfinite(sd_all[j]):
            dropped[j] = "zero variance"
        else:
            active.append(j)
    z = np.zeros_like(x)
    if active:
        z[:, active], _ = _standardize(x[:, active])
    active, collinear = _independent_columns(z, active)
    for j in collinear:
        dropped[j] = "collinear"
        warnings.warn(f"dropping collinear metric {names[j]!r}", stacklevel=3)

    coef_std = np.zeros(0)
    while active:
        design = np.column_stack([np.ones(n_pol), z[:, active]])
        sol, *_ = np.linalg.lstsq(design, y, rcond=None)
        coef_std = sol[1:]
        scale = np.max(np.abs(coef_std))
        keep = coef_std > 1e-9 * scale if scale > 0 else np.zeros(len(active), bool)
        if keep.all():
            break
        for j, k in zip(active, keep):
            if not k:
                dropped[j] = "non-positive coefficient"
        active = [j for j, k in zip(active, keep) if k]
        coef_std = coef_std[keep]

    if not active:
        return _GammaFit([], np.zeros(0), 0.0, 1.0, dropped)
    coef = coef_std / sd_all[active]
    combo = x[:, active] @ coef
    r = pearson(combo, y)
    p = len(active)
    dof = n_pol - p - 1
    r2 = min(r * r, 1.0)
    if dof <= 0:
        pval = 1.0
    elif r2 >= 1.0:
        pval = 0.0
    else:
        fstat = (r2 / p) / ((1.0 - r2) / dof)
        pval = float(stats.f.sf(fstat, p, dof))
    return _GammaFit(active, coef, r, pval, dropped)


def fit_uwe(
    features: Mapping[float, np.ndarray],
    target: Sequence[float],
    metric_names: Sequence[str],
    policy_ids: Sequence[str],
    gamma_grid: Sequence[float] = DEFAULT_GAMMA_GRID,
    holdout_fraction: float = 0.3,
    uncertainty_target: str = "steer",
    estimator: str = "mc_samples",
    alpha: float = 0.05,
) -> tuple[UweConfig, FitDiagnostics]:
    """Fit ``gamma`` and non-negative ``beta`` so the combination tracks ``target``.

    ``features[gamma]`` is a (policies x metrics) matrix of base metrics
    aggregated with weights ``u ** gamma``. ``target`` must be oriented so that
    larger means worse (pass ``-driving_score``, not the score itself), because
    the combination is an error and only positive coefficients are kept.

    For each gamma: ordinary least squares with intercept on standardized
    columns, dropping non-positive coefficients and refitting until all
    survivors are positive. The gamma with the highest in-sample Pearson wins.
    """
    names = list(metric_names)
    ids = list(policy_ids)
    y_all = np.asarray(target, dtype=float)
    if len(ids) != len(y_all) or len(set(ids)) != len(ids):
        raise FitError("policy_ids must be unique and match the target length")
    if not gamma_grid:
        raise FitError("empty gamma grid")
    train_ids, held_ids = split_policies(ids, holdout_fraction)
    index = {p: i for i, p in enumerate(ids)}
    tr = np.array([index[p] for p in train_ids], dtype=int)
    ho = np.array([index[p] for p in held_ids], dtype=int)
    n_met = len(names)
    if len(tr) < n_met:
        raise FitError(f"fewer training policies ({len(tr)}) than metrics ({n_met})")
    if len(tr) < n_met + 2:
        raise FitError(f"need at least {n_met + 2} training policies for {n_met} metrics, got {len(tr)}")
    y = y_all[tr]
    if np.std(y) == 0:
        raise FitError("target has zero variance over the training policies")

    fits: dict[float, _GammaFit] = {}
    for g in gamma_grid:
        x = np.asarray(features[g], dtype=float)
        if x.shape != (len(ids), n_met):
            raise FitError(f"features for gamma={g} have shape {x.shape}, expected {(len(ids), n_met)}")
        fits[float(g)] = _fit_one_gamma(x[tr], y, names)

    best_g = max(fits, key=lambda g: (fits[g].pearson, -list(fits).index(g)))
    best = fits[best_g]
    flags: list[str] = []
    if best.included:
        raw = np.zeros(n_met)
        raw[best.included] = best.coef
        betas = raw / raw.sum()
    else:
        betas = np.full(n_met, 1.0 / n_met)
        flags.append("no positive coefficient")
    if not best.included or best.f_pvalue > alpha:
        flags.append("no predictive metric")
    if any(reason == "collinear" for reason in best.dropped.values()):
        flags.append("collinear metrics dropped")

    held_r: Optional[float] = None
    if len(ho) >= 3:
        combo = np.asarray(features[best_g], dtype=float)[ho] @ betas
        try:
            held_r = pearson(combo, y_all[ho])
        except DegenerateSeriesError:
            flags.append("held-out series degenerate")
    in_r = best.pearson
    if not best.included:
        try:
            in_r = pearson(np.asarray(features[best_g], dtype=float)[tr] @ betas, y)
        except DegenerateSeriesError:
            in_r = 0.0

    cfg = UweConfig(
        gamma=best_g,
        betas={n: float(b) for n, b in zip(names, betas)},
        target=uncertainty_target,
        estimator=estimator,
    )
    diag = FitDiagnostics(
        gamma=best_g,
        in_sample_pearson=float(in_r),
        held_out_pearson=None if held_r is None else float(held_r),
        per_gamma_pearson={g: float(f.pearson) for g, f in fits.items()},
        f_pvalue=float(best.f_pvalue),
        included=[names[j] for j in best.included],
        dropped={names[j]: why for j, why in sorted(best.dropped.items())},
        train_ids=train_ids,
        held_out_ids=held_ids,
        flags=flags,
    )
    if flags:
        logger.info("UWE fit flags: %s", ", ".join(flags))
    return cfg, diag
