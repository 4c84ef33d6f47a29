"""Shared builders, hypothesis strategies and the bundled-study fixture."""

from __future__ import annotations

import time
from contextlib import contextmanager
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from drivecorr.datamodel import Action, Dataset, ObservationMeta, PredictionRecord, WaypointPlan

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


# -- plain builders ---------------------------------------------------------------------


def make_record(
    gt=(0.0, 0.0, 0.0),
    samples: Sequence[Sequence[float]] = ((0.0, 0.0, 0.0),),
    speed: float = 5.0,
    command: int = 0,
    gt_wp: Optional[Sequence[Sequence[float]]] = None,
    sample_wp: Optional[Sequence[Sequence[Sequence[float]]]] = None,
    rid: str = "r0",
    executed=None,
) -> PredictionRecord:
    return PredictionRecord(
        record_id=rid,
        gt_action=Action(*gt),
        meta=ObservationMeta(speed, command),
        samples_action=tuple(Action(*s) for s in samples),
        executed_action=None if executed is None else Action(*executed),
        gt_waypoints=None if gt_wp is None else WaypointPlan(tuple(map(tuple, gt_wp))),
        samples_waypoints=None if sample_wp is None else tuple(WaypointPlan(tuple(map(tuple, p))) for p in sample_wp),
    )


def steer_record(gt_steer: float, pred_steer: float, rid: str = "r0", speed: float = 5.0) -> PredictionRecord:
    return make_record(gt=(gt_steer, 0.0, 0.0), samples=[(pred_steer, 0.0, 0.0)], rid=rid, speed=speed)


def plan_record(gt_wp, pred_wp, rid: str = "r0") -> PredictionRecord:
    return make_record(gt_wp=gt_wp, sample_wp=[pred_wp], rid=rid)


def random_record(rng: np.random.Generator, rid: str, K: int = 4, W: Optional[int] = 3) -> PredictionRecord:
    """Random valid record; some steer values sit exactly on the quantizer and TRE boundaries."""

    def action():
        s = float(rng.uniform(-1, 1))
        if rng.random() < 0.1:
            s = float(rng.choice([-0.5, 0.5, 0.0]))
        return (s, float(rng.uniform(0, 1)), float(rng.uniform(0, 1)) * (rng.random() < 0.3))

    gt = action()
    samples = [action() for _ in range(K)]
    if rng.random() < 0.1:
        samples = [gt] * K
    gt_wp = sample_wp = None
    if W:
        gt_wp = rng.normal(0, 5, size=(W, 2)).tolist()
        sample_wp = (np.asarray(gt_wp) + rng.normal(0, 1, size=(K, W, 2))).tolist()
    return make_record(gt, samples, float(rng.uniform(0, 12)), int(rng.integers(0, 4)), gt_wp, sample_wp, rid)


def random_dataset(rng: np.random.Generator, n: int, K: int = 4, W: Optional[int] = 3) -> Dataset:
    return Dataset.from_records([random_record(rng, f"r{i:05d}", K, W) for i in range(n)])


# -- hypothesis strategies -----------------------------------------------------------------

unit = st.floats(0.0, 1.0, allow_nan=False)
signed = st.floats(-1.0, 1.0, allow_nan=False)
actions = st.tuples(signed, unit, unit)
coords = st.floats(-50.0, 50.0, allow_nan=False)


@st.composite
def records(draw, K: Optional[int] = None, W: Optional[int] = None, with_waypoints: Optional[bool] = None):
    k = K if K is not None else draw(st.integers(1, 6))
    wp = with_waypoints if with_waypoints is not None else draw(st.booleans())
    gt = draw(actions)
    samples = draw(st.lists(actions, min_size=k, max_size=k))
    speed = draw(st.floats(0.0, 20.0, allow_nan=False))
    command = draw(st.integers(0, 3))
    gt_wp = sample_wp = None
    if wp:
        w = W if W is not None else draw(st.integers(1, 4))
        pt = st.tuples(coords, coords)
        gt_wp = draw(st.lists(pt, min_size=w, max_size=w))
        sample_wp = [draw(st.lists(pt, min_size=w, max_size=w)) for _ in range(k)]
    return make_record(gt, samples, speed, command, gt_wp, sample_wp, draw(st.text("abcxyz0123/_", min_size=1, max_size=8)))


@st.composite
def datasets(draw, min_size: int = 1, max_size: int = 12):
    k = draw(st.integers(1, 5))
    wp = draw(st.booleans())
    w = draw(st.integers(1, 4))
    n = draw(st.integers(min_size, max_size))
    recs = []
    for i in range(n):
        r = draw(records(K=k, W=w, with_waypoints=wp))
        recs.append(
            PredictionRecord(f"r{i}", r.gt_action, r.meta, r.samples_action, None, r.gt_waypoints, r.samples_waypoints)
        )
    return Dataset.from_records(recs)


# -- bundled study ---------------------------------------------------------------------------


class BundledRun:
    def __init__(self, root: Path, study: Path, report: Path, seconds: float, codes: tuple[int, int]):
        self.root = root
        self.study = study
        self.report = report
        self.seconds = seconds
        self.codes = codes


@pytest.fixture(scope="session")
def bundled_run(tmp_path_factory) -> BundledRun:
    """``simulate`` then ``report`` with defaults throughout, single-threaded, timed."""
    from drivecorr.cli import main

    root = tmp_path_factory.mktemp("bundled")
    study, rep = root / "study", root / "report"
    t0 = time.perf_counter()
    c1 = main(["simulate", "--out", str(study)])
    c2 = main(["report", str(study), "--out", str(rep)])
    return BundledRun(root, study, rep, time.perf_counter() - t0, (c1, c2))


def read_rows(path: Path) -> list[list[str]]:
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


# -- acceptance verdict lines ----------------------------------------------------------------

VERDICTS: list[str] = []


@contextmanager
def criterion(number: int, title: str):
    """Record one PASS/FAIL line for an acceptance criterion; yields a dict for the detail text."""
    info = {"detail": ""}
    t0 = time.perf_counter()
    try:
        yield info
    except BaseException as exc:
        first = str(exc).strip().splitlines()[0] if str(exc).strip() else ""
        line = f"FAIL criterion {number} ({title}): {type(exc).__name__} {first}"
        VERDICTS.append(line)
        print(line)
        raise
    line = f"PASS criterion {number} ({title}): {info['detail']} [{time.perf_counter() - t0:.2f} s]"
    VERDICTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
