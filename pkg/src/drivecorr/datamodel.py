"""Domain types for offline prediction datasets and their file format.

A dataset file is line-oriented: a header line ``{"header": {...}}`` followed
by one record per line. See :func:`record_to_obj` for the canonical key order.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from .textio import ParseError, iter_lines, write_lines

COMMANDS = ("follow", "left", "right", "straight")
FOLLOW, LEFT, RIGHT, STRAIGHT = range(4)

_RECORD_KEYS = (
    "record_id",
    "gt_steer",
    "gt_throttle",
    "gt_brake",
    "speed",
    "command",
    "samples",
    "executed",
    "gt_waypoints",
    "sample_waypoints",
    "ctx",
)
_REQUIRED_KEYS = ("record_id", "gt_steer", "gt_throttle", "gt_brake", "speed", "command", "samples")


class DatasetError(ValueError):
    """Invariant violation in a dataset; names the offending record and field."""

    def __init__(
        self,
        message: str,
        record_id: Optional[str] = None,
        field: Optional[str] = None,
        line_no: Optional[int] = None,
    ):
        self.message = message
        self.record_id = record_id
        self.field = field
        self.line_no = line_no
        where = "" if line_no is None else f"line {line_no}: "
        if record_id is not None:
            where += f"record {record_id!r}"
            if field is not None:
                where += f", field {field!r}"
            where += ": "
        super().__init__(where + message)


def _finite(x: float, name: str) -> float:
    x = float(x)
    if not math.isfinite(x):
        raise DatasetError(f"{name} must be finite, got {x!r}", field=name)
    return x


@dataclass(frozen=True)
class Action:
    """Low-level control: steer in [-1, 1] (positive = right), throttle and brake in [0, 1]."""

    steer: float
    throttle: float
    brake: float

    def __post_init__(self):
        s = _finite(self.steer, "steer")
        t = _finite(self.throttle, "throttle")
        b = _finite(self.brake, "brake")
        if not -1.0 <= s <= 1.0:
            raise DatasetError(f"steer out of range [-1, 1]: {s}", field="steer")
        if not 0.0 <= t <= 1.0:
            raise DatasetError(f"throttle out of range [0, 1]: {t}", field="throttle")
        if not 0.0 <= b <= 1.0:
            raise DatasetError(f"brake out of range [0, 1]: {b}", field="brake")
        object.__setattr__(self, "steer", s)
        object.__setattr__(self, "throttle", t)
        object.__setattr__(self, "brake", b)

    @classmethod
    def clamped(cls, steer: float, throttle: float, brake: float) -> "Action":
        return cls(min(1.0, max(-1.0, steer)), min(1.0, max(0.0, throttle)), min(1.0, max(0.0, brake)))

    @property
    def longitudinal(self) -> float:
        return self.throttle - self.brake

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.steer, self.throttle, self.brake)


@dataclass(frozen=True)
class WaypointPlan:
    """Ordered ego-frame (x forward, y left) points in meters."""

    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = tuple((float(x), float(y)) for x, y in self.points)
        # a single sum catches any inf/nan; the per-value scan runs only on failure
        if not math.isfinite(sum(c for p in pts for c in p)):
            for x, y in pts:
                _finite(x, "waypoint")
                _finite(y, "waypoint")
        if len(pts) < 1:
            raise DatasetError("waypoint plan needs at least one point", field="waypoints")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class ObservationMeta:
    speed: float
    command: int

    def __post_init__(self):
        v = _finite(self.speed, "speed")
        if v < 0:
            raise DatasetError(f"speed must be non-negative, got {v}", field="speed")
        if not isinstance(self.command, (int, np.integer)) or isinstance(self.command, bool):
            raise DatasetError(f"command must be an integer, got {self.command!r}", field="command")
        if not 0 <= int(self.command) < len(COMMANDS):
            raise DatasetError(f"command {self.command} not in {list(range(len(COMMANDS)))}", field="command")
        object.__setattr__(self, "speed", v)
        object.__setattr__(self, "command", int(self.command))


def derive_executed_action(samples: Sequence[Action]) -> Action:
    """Component-wise mean of the MC samples, clamped to the legal ranges."""
    if len(samples) == 0:
        raise DatasetError("cannot derive executed action from zero samples", field="samples")
    return Action.clamped(*(_mean([a.as_tuple()[j] for a in samples]) for j in range(3)))


def _mean(xs: Sequence[float]) -> float:
    # offsets from the first value keep the mean of identical values exact
    x0 = xs[0]
    return x0 + math.fsum(x - x0 for x in xs) / len(xs)


def sample_mean(x: np.ndarray, axis: int) -> np.ndarray:
    """Mean along the sample axis; exact when all samples are identical."""
    first = np.take(x, [0], axis=axis)
    return np.squeeze(first, axis=axis) + (x - first).mean(axis=axis)


@dataclass(frozen=True)
class PredictionRecord:
    record_id: str
    gt_action: Action
    meta: ObservationMeta
    samples_action: tuple[Action, ...]
    executed_action: Optional[Action] = None
    gt_waypoints: Optional[WaypointPlan] = None
    samples_waypoints: Optional[tuple[WaypointPlan, ...]] = None
    # simulator state snapshot; opaque to the metric modules
    ctx: Optional[dict] = field(default=None, compare=False)

    def __post_init__(self):
        rid = self.record_id
        if not isinstance(rid, str) or not rid:
            raise DatasetError("record_id must be a non-empty string", record_id=str(rid), field="record_id")
        samples = tuple(self.samples_action)
        if len(samples) < 1:
            raise DatasetError("need K >= 1 samples", record_id=rid, field="samples")
        object.__setattr__(self, "samples_action", samples)
        if self.executed_action is None:
            object.__setattr__(self, "executed_action", derive_executed_action(samples))
        if (self.gt_waypoints is None) != (self.samples_waypoints is None):
            raise DatasetError(
                "sample_waypoints must be present iff gt_waypoints is present",
                record_id=rid,
                field="sample_waypoints",
            )
        if self.samples_waypoints is not None:
            swp = tuple(self.samples_waypoints)
            if len(swp) != len(samples):
                raise DatasetError(
                    f"expected {len(samples)} waypoint samples, got {len(swp)}",
                    record_id=rid,
                    field="sample_waypoints",
                )
            w = len(self.gt_waypoints)
            if any(len(p) != w for p in swp):
                raise DatasetError("waypoint sample length differs from gt_waypoints", record_id=rid, field="sample_waypoints")
            object.__setattr__(self, "samples_waypoints", swp)

    @property
    def K(self) -> int:
        return len(self.samples_action)

    @property
    def has_waypoints(self) -> bool:
        return self.gt_waypoints is not None

    def predicted_waypoints(self) -> np.ndarray:
        """Per-point mean over the K sample plans, shape (W, 2)."""
        if self.samples_waypoints is None:
            raise DatasetError("record has no waypoints", record_id=self.record_id, field="gt_waypoints")
        return sample_mean(np.array([p.points for p in self.samples_waypoints], dtype=float), 0)

    def with_predictions(
        self,
        samples_action: Sequence[Action],
        executed_action: Optional[Action] = None,
        samples_waypoints: Optional[Sequence[WaypointPlan]] = None,
    ) -> "PredictionRecord":
        return PredictionRecord(
            record_id=self.record_id,
            gt_action=self.gt_action,
            meta=self.meta,
            samples_action=tuple(samples_action),
            executed_action=executed_action,
            gt_waypoints=self.gt_waypoints,
            samples_waypoints=None if samples_waypoints is None else tuple(samples_waypoints),
            ctx=self.ctx,
        )


@dataclass(frozen=True)
class DatasetHeader:
    K: int
    W: Optional[int] = None
    command_enum: tuple[str, ...] = COMMANDS


@dataclass(frozen=True)
class Dataset:
    header: DatasetHeader
    records: tuple[PredictionRecord, ...]

    def __post_init__(self):
        recs = tuple(self.records)
        object.__setattr__(self, "records", recs)
        if not recs:
            raise DatasetError("empty dataset")
        seen = set()
        for r in recs:
            if r.record_id in seen:
                raise DatasetError("duplicate record_id", record_id=r.record_id, field="record_id")
            seen.add(r.record_id)
            if r.K != self.header.K:
                raise DatasetError(f"K={r.K} differs from header K={self.header.K}", record_id=r.record_id, field="samples")
            if self.header.W is None:
                if r.has_waypoints:
                    raise DatasetError("header declares no waypoints", record_id=r.record_id, field="gt_waypoints")
            else:
                if not r.has_waypoints:
                    raise DatasetError("missing waypoints", record_id=r.record_id, field="gt_waypoints")
                if len(r.gt_waypoints) != self.header.W:
                    raise DatasetError(
                        f"W={len(r.gt_waypoints)} differs from header W={self.header.W}",
                        record_id=r.record_id,
                        field="gt_waypoints",
                    )

    @classmethod
    def from_records(cls, records: Sequence[PredictionRecord]) -> "Dataset":
        if not records:
            raise DatasetError("empty dataset")
        first = records[0]
        w = len(first.gt_waypoints) if first.has_waypoints else None
        return cls(DatasetHeader(K=first.K, W=w), tuple(records))

    def __len__(self) -> int:
        return len(self.records)

    @property
    def has_waypoints(self) -> bool:
        return self.header.W is not None

    @cached_property
    def arrays(self) -> "DatasetArrays":
        return DatasetArrays.build(self)


@dataclass(frozen=True)
class DatasetArrays:
    """Column view of a dataset used by the vectorized metric paths."""

    gt: np.ndarray  # (N, 3)
    samples: np.ndarray  # (N, K, 3)
    executed: np.ndarray  # (N, 3)
    speed: np.ndarray  # (N,)
    gt_wp: Optional[np.ndarray]  # (N, W, 2)
    sample_wp: Optional[np.ndarray]  # (N, K, W, 2)

    @classmethod
    def build(cls, ds: Dataset) -> "DatasetArrays":
        recs = ds.records
        gt = np.array([r.gt_action.as_tuple() for r in recs], dtype=float)
        samples = np.array([[a.as_tuple() for a in r.samples_action] for r in recs], dtype=float)
        executed = np.array([r.executed_action.as_tuple() for r in recs], dtype=float)
        speed = np.array([r.meta.speed for r in recs], dtype=float)
        gt_wp = sample_wp = None
        if ds.has_waypoints:
            gt_wp = np.array([r.gt_waypoints.points for r in recs], dtype=float)
            sample_wp = np.array([[p.points for p in r.samples_waypoints] for r in recs], dtype=float)
        for a in (gt, samples, executed, speed, gt_wp, sample_wp):
            if a is not None:
                a.setflags(write=False)
        return cls(gt, samples, executed, speed, gt_wp, sample_wp)


# -- serialization -----------------------------------------------------------


def header_to_obj(h: DatasetHeader) -> dict:
    body: dict[str, Any] = {"K": h.K}
    if h.W is not None:
        body["W"] = h.W
    body["command_enum"] = list(h.command_enum)
    return {"header": body}


def record_to_obj(r: PredictionRecord, with_ctx: bool = True) -> dict:
    obj: dict[str, Any] = {
        "record_id": r.record_id,
        "gt_steer": r.gt_action.steer,
        "gt_throttle": r.gt_action.throttle,
        "gt_brake": r.gt_action.brake,
        "speed": r.meta.speed,
        "command": r.meta.command,
        "samples": [list(a.as_tuple()) for a in r.samples_action],
        "executed": list(r.executed_action.as_tuple()),
    }
    if r.gt_waypoints is not None:
        obj["gt_waypoints"] = [list(p) for p in r.gt_waypoints.points]
        obj["sample_waypoints"] = [[list(p) for p in plan.points] for plan in r.samples_waypoints]
    if with_ctx and r.ctx is not None:
        obj["ctx"] = r.ctx
    return obj


def _triple(v: Any, rid: str, name: str) -> Action:
    if not isinstance(v, (list, tuple)) or len(v) != 3:
        raise DatasetError("expected a [steer, throttle, brake] triple", record_id=rid, field=name)
    try:
        return Action(*v)
    except DatasetError as exc:
        raise DatasetError(exc.message, record_id=rid, field=exc.field or name) from None
    except (TypeError, ValueError):
        raise DatasetError("non-numeric action component", record_id=rid, field=name) from None


def _plan(v: Any, rid: str, name: str) -> WaypointPlan:
    if not isinstance(v, list) or not v or not all(type(p) is list and len(p) == 2 for p in v):
        raise DatasetError("expected a non-empty array of [x, y] pairs", record_id=rid, field=name)
    try:
        return WaypointPlan(v)
    except (DatasetError, TypeError, ValueError):
        raise DatasetError("waypoint coordinates must be finite numbers", record_id=rid, field=name) from None


def record_from_obj(obj: dict) -> PredictionRecord:
    missing = [k for k in _REQUIRED_KEYS if k not in obj]
    rid = str(obj.get("record_id", "?"))
    if missing:
        raise DatasetError(f"missing required key(s) {missing}", record_id=rid, field=missing[0])
    unknown = [k for k in obj if k not in _RECORD_KEYS]
    if unknown:
        warnings.warn(f"record {rid!r}: ignoring unknown key(s) {unknown}", stacklevel=3)
    try:
        gt = Action(obj["gt_steer"], obj["gt_throttle"], obj["gt_brake"])
    except DatasetError as exc:
        raise DatasetError(exc.message, record_id=rid, field=exc.field) from None
    except (TypeError, ValueError):
        raise DatasetError("non-numeric ground-truth action", record_id=rid, field="gt_steer") from None
    try:
        meta = ObservationMeta(obj["speed"], obj["command"])
    except DatasetError as exc:
        raise DatasetError(exc.message, record_id=rid, field=exc.field) from None
    except (TypeError, ValueError):
        raise DatasetError("non-numeric speed", record_id=rid, field="speed") from None
    samples = obj["samples"]
    if not isinstance(samples, list) or not samples:
        raise DatasetError("samples must be a non-empty array", record_id=rid, field="samples")
    sample_actions = tuple(_triple(s, rid, "samples") for s in samples)
    executed = _triple(obj["executed"], rid, "executed") if "executed" in obj else None
    gt_wp = swp = None
    if "gt_waypoints" in obj or "sample_waypoints" in obj:
        if "gt_waypoints" not in obj or "sample_waypoints" not in obj:
            raise DatasetError("gt_waypoints and sample_waypoints must appear together", record_id=rid, field="sample_waypoints")
        gt_wp = _plan(obj["gt_waypoints"], rid, "gt_waypoints")
        if not isinstance(obj["sample_waypoints"], list):
            raise DatasetError("sample_waypoints must be an array of plans", record_id=rid, field="sample_waypoints")
        swp = tuple(_plan(p, rid, "sample_waypoints") for p in obj["sample_waypoints"])
    ctx = obj.get("ctx")
    return PredictionRecord(rid, gt, meta, sample_actions, executed, gt_wp, swp, ctx)


def _brake_throttle_check(records: Sequence[PredictionRecord]) -> None:
    bad = [r.record_id for r in records if r.gt_action.brake > 0.5 and r.gt_action.throttle > 0.5]
    if bad:
        warnings.warn(f"{len(bad)} record(s) with brake and throttle both > 0.5, first {bad[0]!r}", stacklevel=3)


def load_dataset(path: str | Path) -> Dataset:
    """Load and validate a dataset file.

    Raises :class:`~drivecorr.textio.ParseError` with the line number for
    malformed lines and :class:`DatasetError` naming record and field for
    invariant violations.
    """
    path = Path(path)
    header: Optional[DatasetHeader] = None
    records: list[PredictionRecord] = []
    for line_no, obj in iter_lines(path):
        if header is None:
            if "header" not in obj:
                raise ParseError(path, line_no, "first line must be the dataset header")
            h = obj["header"]
            try:
                k = int(h["K"])
                w = None if h.get("W") is None else int(h["W"])
                enum = tuple(h.get("command_enum", COMMANDS))
            except (KeyError, TypeError, ValueError):
                raise ParseError(path, line_no, "header needs integer K and optional W") from None
            if k < 1 or (w is not None and w < 1):
                raise ParseError(path, line_no, "header K and W must be >= 1")
            if enum != COMMANDS:
                raise ParseError(path, line_no, f"unsupported command_enum {list(enum)}")
            header = DatasetHeader(K=k, W=w, command_enum=enum)
            continue
        try:
            records.append(record_from_obj(obj))
        except DatasetError as exc:
            raise DatasetError(exc.message, exc.record_id, exc.field, line_no) from None
    if header is None or not records:
        raise DatasetError("empty dataset")
    _brake_throttle_check(records)
    return Dataset(header, tuple(records))


def save_dataset(ds: Dataset, path: str | Path, with_ctx: bool = True) -> None:
    """Write the header line and one line per record; ``with_ctx=False`` drops simulator state."""
    write_lines(path, [header_to_obj(ds.header)] + [record_to_obj(r, with_ctx) for r in ds.records])
