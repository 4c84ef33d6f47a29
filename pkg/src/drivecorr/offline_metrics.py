"""Offline (open-loop) metrics: per-record loss kernels and weighted aggregation.

Every kernel exists twice: a per-record function operating on a
:class:`PredictionRecord`, and a vectorized path in :func:`record_losses`
used for whole datasets. Both must agree to rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .datamodel import Dataset, PredictionRecord, sample_mean


class MetricError(ValueError):
    """A metric could not be computed for the given dataset."""


class DegenerateWeightingError(MetricError):
    def __init__(self, detail: str = ""):
        super().__init__("degenerate weighting" + (f": {detail}" if detail else ""))


NORMS = ("L1", "L2")


@dataclass(frozen=True)
class QceConfig:
    sigma: float = 0.5

    def __post_init__(self):
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValueError(f"QCE sigma must be > 0, got {self.sigma}")


@dataclass(frozen=True)
class TreConfig:
    lam: float = 0.1
    # "steer" compares the steering scalar; "action" the (steer, throttle - brake) vector
    target: str = "steer"

    def __post_init__(self):
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ValueError(f"TRE lambda must be > 0, got {self.lam}")
        if self.target not in ("steer", "action"):
            raise ValueError(f"TRE target must be 'steer' or 'action', got {self.target!r}")


KERNEL_KINDS = (
    "steer",
    "action",
    "throttle",
    "qce",
    "tre",
    "waypoint_mae",
    "waypoint_fde",
    "displacement_fde",
)
WAYPOINT_KINDS = ("waypoint_mae", "waypoint_fde", "displacement_fde")


@dataclass(frozen=True)
class LossKernel:
    kind: str
    norm: str = "L1"
    params: Union[QceConfig, TreConfig, None] = None

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown loss kernel {self.kind!r}")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        if self.kind == "qce" and not isinstance(self.params, QceConfig):
            object.__setattr__(self, "params", QceConfig())
        if self.kind == "tre" and not isinstance(self.params, TreConfig):
            object.__setattr__(self, "params", TreConfig())

    @property
    def needs_waypoints(self) -> bool:
        return self.kind in WAYPOINT_KINDS


@dataclass(frozen=True)
class WeightScheme:
    """Per-record weights alpha_i: uniform, speed (alpha = v), or uncertainty (alpha = u ** gamma)."""

    kind: str = "uniform"
    gamma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform", "speed", "uncertainty"):
            raise ValueError(f"unknown weight scheme {self.kind!r}")
        if self.kind == "uncertainty" and not math.isfinite(self.gamma):
            raise ValueError("gamma must be finite")

    @classmethod
    def uniform(cls) -> "WeightScheme":
        return cls("uniform")

    @classmethod
    def speed(cls) -> "WeightScheme":
        return cls("speed")

    @classmethod
    def uncertainty(cls, gamma: float = 1.0) -> "WeightScheme":
        return cls("uncertainty", float(gamma))


# -- per-record kernels --------------------------------------------------------


def _err(diff: float, norm: str) -> float:
    return abs(diff) if norm == "L1" else diff * diff


def steer_loss(record: PredictionRecord, norm: str = "L1") -> float:
    return _err(record.executed_action.steer - record.gt_action.steer, norm)


def action_loss(record: PredictionRecord, norm: str = "L1") -> float:
    """Mean error over steer and the signed longitudinal command throttle - brake."""
    p, g = record.executed_action, record.gt_action
    return 0.5 * (_err(p.steer - g.steer, norm) + _err(p.longitudinal - g.longitudinal, norm))


def quantize(x: float, sigma: float) -> int:
    # the boundary x == sigma falls in the upper bin
    if x < -sigma:
        return -1
    if x < sigma:
        return 0
    return 1


def qce_loss(record: PredictionRecord, cfg: QceConfig = QceConfig()) -> int:
    return int(quantize(record.gt_action.steer, cfg.sigma) != quantize(record.executed_action.steer, cfg.sigma))


def heaviside(x: float) -> int:
    return 1 if x > 0 else 0


def tre_loss(record: PredictionRecord, cfg: TreConfig = TreConfig()) -> int:
    p, g = record.executed_action, record.gt_action
    if cfg.target == "steer":
        return heaviside(abs(p.steer - g.steer) - cfg.lam * abs(g.steer))
    err = np.hypot(p.steer - g.steer, p.longitudinal - g.longitudinal)
    return heaviside(err - cfg.lam * np.hypot(g.steer, g.longitudinal))


def throttle_loss(record: PredictionRecord) -> float:
    return abs(record.executed_action.throttle - record.gt_action.throttle)


def _plans(record: PredictionRecord) -> tuple[np.ndarray, np.ndarray]:
    if not record.has_waypoints:
        raise MetricError(f"record {record.record_id!r} has no waypoints")
    return record.predicted_waypoints(), np.asarray(record.gt_waypoints.points, dtype=float)


def waypoint_mae(record: PredictionRecord) -> float:
    pred, gt = _plans(record)
    return float(np.mean(np.hypot(pred[:, 0] - gt[:, 0], pred[:, 1] - gt[:, 1])))


def waypoint_fde(record: PredictionRecord) -> float:
    pred, gt = _plans(record)
    return float(np.hypot(pred[-1, 0] - gt[-1, 0], pred[-1, 1] - gt[-1, 1]))


def displacement_fde(record: PredictionRecord) -> float:
    """Difference of final displacement magnitudes from the ego origin (direction ignored)."""
    pred, gt = _plans(record)
    return float(abs(np.hypot(pred[-1, 0], pred[-1, 1]) - np.hypot(gt[-1, 0], gt[-1, 1])))


def record_loss(record: PredictionRecord, kernel: LossKernel) -> float:
    k = kernel.kind
    if k == "steer":
        return steer_loss(record, kernel.norm)
    if k == "action":
        return action_loss(record, kernel.norm)
    if k == "throttle":
        return throttle_loss(record)
    if k == "qce":
        return float(qce_loss(record, kernel.params))
    if k == "tre":
        return float(tre_loss(record, kernel.params))
    if k == "waypoint_mae":
        return waypoint_mae(record)
    if k == "waypoint_fde":
        return waypoint_fde(record)
    return displacement_fde(record)


# -- vectorized dataset path ---------------------------------------------------


def _verr(diff: np.ndarray, norm: str) -> np.ndarray:
    return np.abs(diff) if norm == "L1" else diff * diff


def _vquantize(x: np.ndarray, sigma: float) -> np.ndarray:
    return np.where(x < -sigma, -1, np.where(x < sigma, 0, 1))


def record_losses(dataset: Dataset, kernel: LossKernel) -> np.ndarray:
    """Per-record losses for the whole dataset, shape (N,)."""
    a = dataset.arrays
    p, g = a.executed, a.gt
    k = kernel.kind
    if k == "steer":
        return _verr(p[:, 0] - g[:, 0], kernel.norm)
    if k == "action":
        dlong = (p[:, 1] - p[:, 2]) - (g[:, 1] - g[:, 2])
        return 0.5 * (_verr(p[:, 0] - g[:, 0], kernel.norm) + _verr(dlong, kernel.norm))
    if k == "throttle":
        return np.abs(p[:, 1] - g[:, 1])
    if k == "qce":
        s = kernel.params.sigma
        return (_vquantize(g[:, 0], s) != _vquantize(p[:, 0], s)).astype(float)
    if k == "tre":
        lam = kernel.params.lam
        if kernel.params.target == "steer":
            x = np.abs(p[:, 0] - g[:, 0]) - lam * np.abs(g[:, 0])
        else:
            dlong = (p[:, 1] - p[:, 2]) - (g[:, 1] - g[:, 2])
            x = np.hypot(p[:, 0] - g[:, 0], dlong) - lam * np.hypot(g[:, 0], g[:, 1] - g[:, 2])
        return (x > 0).astype(float)
    if a.gt_wp is None:
        raise MetricError(f"kernel {k!r} needs waypoints but the dataset is control-only")
    pred = sample_mean(a.sample_wp, 1)
    gt = a.gt_wp
    if k == "waypoint_mae":
        return np.mean(np.hypot(pred[..., 0] - gt[..., 0], pred[..., 1] - gt[..., 1]), axis=1)
    if k == "waypoint_fde":
        return np.hypot(pred[:, -1, 0] - gt[:, -1, 0], pred[:, -1, 1] - gt[:, -1, 1])
    return np.abs(np.hypot(pred[:, -1, 0], pred[:, -1, 1]) - np.hypot(gt[:, -1, 0], gt[:, -1, 1]))


# -- aggregation ---------------------------------------------------------------


def record_weights(dataset: Dataset, weights: WeightScheme, uncertainty: Optional[Sequence[float]] = None) -> np.ndarray:
    n = len(dataset)
    if weights.kind == "uniform":
        return np.ones(n)
    if weights.kind == "speed":
        return np.asarray(dataset.arrays.speed, dtype=float)
    if uncertainty is None:
        raise MetricError("uncertainty weighting requires per-record uncertainty estimates")
    u = np.asarray(uncertainty, dtype=float)
    if u.shape != (n,):
        raise MetricError(f"uncertainty estimate has {u.size} entries for {n} records")
    with np.errstate(divide="ignore"):
        w = np.power(u, weights.gamma)
    if not np.all(np.isfinite(w)):
        raise DegenerateWeightingError("non-finite uncertainty weight (zero variance with negative gamma?)")
    return w


def weighted_mean(losses: Sequence[float], alphas: Sequence[float], normalized: bool = True) -> float:
    """sum(alpha * L) / sum(alpha), or / N for the bare expectation form.

    Uses exactly rounded summation, so the result does not depend on record
    order or on how the per-record work was split.
    """
    losses = np.asarray(losses, dtype=float)
    alphas = np.asarray(alphas, dtype=float)
    num = math.fsum((alphas * losses).tolist())
    if not normalized:
        return num / len(losses)
    den = math.fsum(alphas.tolist())
    if den == 0.0:
        raise DegenerateWeightingError("sum of weights is zero")
    return num / den


def aggregate(
    dataset: Dataset,
    kernel: LossKernel,
    weights: WeightScheme = WeightScheme(),
    uncertainty: Optional[Sequence[float]] = None,
    normalized: bool = True,
) -> float:
    if kernel.needs_waypoints and not dataset.has_waypoints:
        raise MetricError(f"kernel {kernel.kind!r} needs waypoints but the dataset is control-only")
    losses = record_losses(dataset, kernel)
    return weighted_mean(losses, record_weights(dataset, weights, uncertainty), normalized)


# -- catalogue and reports -----------------------------------------------------


@dataclass(frozen=True)
class MetricSpec:
    name: str
    kernel: LossKernel
    weights: WeightScheme = WeightScheme()


@dataclass
class MetricReport:
    """Named offline metric values for one policy, in catalogue order.

    ``raw`` holds the unnormalized expectation form for every non-uniformly
    weighted metric.
    """

    policy_id: str
    values: dict[str, Optional[float]]
    raw: dict[str, Optional[float]] = field(default_factory=dict)

    def rows(self, include_raw: bool = True) -> list[tuple[str, str, Optional[float]]]:
        out = [(self.policy_id, k, v) for k, v in self.values.items()]
        if include_raw:
            out += [(self.policy_id, f"{k}_raw", v) for k, v in self.raw.items()]
        return out


def table_catalogue(qce: QceConfig = QceConfig(), tre: TreConfig = TreConfig(), gamma: float = 1.0) -> list[MetricSpec]:
    """The offline metric rows of the survey table (PDM score excluded)."""
    uw = WeightScheme.uncertainty(gamma)
    sw = WeightScheme.speed()
    return [
        MetricSpec("steer_mse", LossKernel("steer", "L2")),
        MetricSpec("sw_steer_mse", LossKernel("steer", "L2"), sw),
        MetricSpec("uw_steer_mse", LossKernel("steer", "L2"), uw),
        MetricSpec("steer_mae", LossKernel("steer", "L1")),
        MetricSpec("sw_steer_mae", LossKernel("steer", "L1"), sw),
        MetricSpec("uw_steer_mae", LossKernel("steer", "L1"), uw),
        MetricSpec("throttle_mae", LossKernel("throttle")),
        MetricSpec("waypoint_mae", LossKernel("waypoint_mae")),
        MetricSpec("waypoint_fde", LossKernel("waypoint_fde")),
        MetricSpec("tre", LossKernel("tre", params=tre)),
        MetricSpec("qce", LossKernel("qce", params=qce)),
        MetricSpec("fde", LossKernel("displacement_fde")),
        MetricSpec("action_mse", LossKernel("action", "L2")),
        MetricSpec("action_mae", LossKernel("action", "L1")),
        MetricSpec("uw_action_mse", LossKernel("action", "L2"), uw),
        MetricSpec("uw_action_mae", LossKernel("action", "L1"), uw),
    ]


def control_catalogue(**kw) -> list[MetricSpec]:
    return [m for m in table_catalogue(**kw) if not m.kernel.needs_waypoints]


def metric_report(
    dataset: Dataset,
    catalogue: Sequence[MetricSpec],
    uncertainty: Optional[Sequence[float]] = None,
    policy_id: str = "",
    skip_degenerate: bool = False,
) -> MetricReport:
    """Evaluate every catalogue entry on ``dataset``.

    With ``skip_degenerate`` a metric whose weights sum to zero (for example
    uncertainty weights on a dataset with identical samples) is reported as
    ``None`` instead of raising.
    """
    if not catalogue:
        raise MetricError("empty metric catalogue")
    names = [m.name for m in catalogue]
    if len(set(names)) != len(names):
        raise MetricError("metric names must be unique within a report")
    values: dict[str, Optional[float]] = {}
    raw: dict[str, Optional[float]] = {}
    cache: dict[LossKernel, np.ndarray] = {}
    for m in catalogue:
        if m.kernel.needs_waypoints and not dataset.has_waypoints:
            raise MetricError(f"metric {m.name!r}: kernel {m.kernel.kind!r} needs waypoints but the dataset is control-only")
        if m.kernel not in cache:
            cache[m.kernel] = record_losses(dataset, m.kernel)
        losses = cache[m.kernel]
        try:
            alphas = record_weights(dataset, m.weights, uncertainty)
            values[m.name] = weighted_mean(losses, alphas, True)
        except DegenerateWeightingError as exc:
            if not skip_degenerate:
                raise MetricError(f"metric {m.name!r}: {exc}") from None
            values[m.name] = None
            if m.weights.kind != "uniform":
                raw[m.name] = None
            continue
        except MetricError as exc:
            raise MetricError(f"metric {m.name!r}: {exc}") from None
        if m.weights.kind != "uniform":
            raw[m.name] = weighted_mean(losses, alphas, False)
    return MetricReport(policy_id, values, raw)


def per_record_report(dataset: Dataset, kernel: LossKernel) -> list[float]:
    """Scalar per-record path; slow, used to cross-check :func:`record_losses`."""
    return [record_loss(r, kernel) for r in dataset.records]
