"""Expert datasets, offline policy predictions and the full policy-family study."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..correlation import MIN_POLICIES, PolicyFamilyTable
from ..datamodel import (
    FOLLOW,
    LEFT,
    RIGHT,
    Action,
    Dataset,
    DatasetHeader,
    ObservationMeta,
    PredictionRecord,
    WaypointPlan,
    derive_executed_action,
)
from ..offline_metrics import LossKernel, MetricReport, QceConfig, TreConfig, metric_report, record_losses, table_catalogue
from ..online_scoring import DEFAULT_PENALTIES, PRIMARY_ONLINE, EpisodeLog, EpisodeScoreSet, score_set
from ..textio import fmt_float
from ..uncertainty import UncertaintyEstimate, default_target, ensemble_uncertainty, estimate_uncertainty
from .policy import PolicySpec, draw_misses, sample_controls, stream, to_action
from .rollout import EXPERT, TraceStep, rollout
from .track import Track
from .world import SimConfig, SimulationError, VehicleState, World, expert_policy

COMMAND_LOOKAHEAD = 10.0  # m
TURN_THRESHOLD = 0.15  # rad of heading change that counts as a turn


class StudyError(RuntimeError):
    pass


def canon(x: float) -> float:
    """Round through the on-disk float format so memory and files agree exactly."""
    return float(fmt_float(float(x)))


def canon_action(a: Action) -> Action:
    return Action(canon(a.steer), canon(a.throttle), canon(a.brake))


@dataclass(frozen=True)
class StudySettings:
    master_seed: int = 42
    stride: int = 5
    waypoints: int = 4
    waypoint_dt: float = 0.5  # s between future plan points
    sim: SimConfig = SimConfig()
    qce_sigma: float = 0.5
    tre_lambda: float = 0.1
    uw_gamma: float = 1.0  # exponent of the uw_* catalogue metrics
    uncertainty_target: Optional[str] = None  # default: waypoints when present
    ensemble_members: int = 0  # > 1 switches the estimator to an ensemble
    uncertainty_source: str = "per_policy"  # or "fixed:<policy_id>"
    penalties: Optional[dict] = None  # default leaderboard coefficients

    def catalogue(self):
        return table_catalogue(QceConfig(self.qce_sigma), TreConfig(self.tre_lambda), self.uw_gamma)


# -- expert dataset --------------------------------------------------------------------


def _wrap(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


def route_command(track: Track, s: float) -> int:
    """Navigation command from the heading change over the next few meters."""
    dh = _wrap(track.heading_at(s + COMMAND_LOOKAHEAD) - track.heading_at(s))
    if dh > TURN_THRESHOLD:
        return LEFT
    if dh < -TURN_THRESHOLD:
        return RIGHT
    return FOLLOW


def future_plan(trace: Sequence[TraceStep], n: int, count: int, every: int) -> list[tuple[float, float]]:
    """Future positions in the ego frame of step ``n`` (x forward, y left), padded at the end."""
    x0, y0, h0, _ = trace[n].state
    c, s = math.cos(h0), math.sin(h0)
    out = []
    for j in range(1, count + 1):
        x, y, _, _ = trace[min(n + j * every, len(trace) - 1)].state
        dx, dy = x - x0, y - y0
        out.append((canon(dx * c + dy * s), canon(-dx * s + dy * c)))
    return out


def _canon_snapshot(snap: list[dict]) -> list[dict]:
    return [{**o, "trig": None if o["trig"] is None else canon(o["trig"])} for o in snap]


def expert_records(track: Track, settings: StudySettings) -> list[PredictionRecord]:
    res = rollout(EXPERT, track, settings.sim, trace=True)
    ep = res.episode
    if ep.terminal != "finished" or ep.events:
        raise StudyError(f"expert failed on track {track.track_id!r}: {ep.terminal}, {len(ep.events)} events")
    trace = res.trace
    every = max(1, int(round(settings.waypoint_dt / settings.sim.dt)))
    out = []
    for n in range(0, len(trace), settings.stride):
        st = trace[n]
        x, y, h, v = (canon(c) for c in st.state)
        ctx = {
            "track": track.track_id,
            "t": canon(st.t),
            "x": x,
            "y": y,
            "heading": h,
            "speed": v,
            "s": canon(st.s),
            "hazards": _canon_snapshot(st.hazards),
        }
        # label at the stored (rounded) state so replaying the record reproduces it exactly
        world = World.restore(track, settings.sim, ctx["hazards"])
        gt = canon_action(expert_policy(VehicleState(x, y, h, v), world, ctx["t"], ctx["s"]))
        plan = WaypointPlan(tuple(future_plan(trace, n, settings.waypoints, every))) if settings.waypoints else None
        out.append(
            PredictionRecord(
                record_id=f"{track.track_id}/{n:05d}",
                gt_action=gt,
                meta=ObservationMeta(v, route_command(track, st.s)),
                samples_action=(gt,),
                executed_action=gt,
                gt_waypoints=plan,
                samples_waypoints=None if plan is None else (plan,),
                ctx=ctx,
            )
        )
    return out


def generate_offline_dataset(tracks: Sequence[Track], settings: StudySettings = StudySettings()) -> Dataset:
    """Ground-truth dataset from expert rollouts, one record every ``stride`` steps."""
    if settings.stride < 1:
        raise StudyError("stride must be >= 1")
    records: list[PredictionRecord] = []
    for track in tracks:
        records.extend(expert_records(track, settings))
    w = settings.waypoints or None
    return Dataset(DatasetHeader(K=1, W=w), tuple(records))


# -- offline predictions ---------------------------------------------------------------


def perturb_plans(
    plan: WaypointPlan, d_steer: Sequence[float], d_long: Sequence[float], dt: float, cfg: SimConfig
) -> list[WaypointPlan]:
    """Plans implied by control offsets: a longitudinal shift plus a constant-curvature bend.

    The bend is evaluated at cruise speed so that the plan spread follows the
    control spread rather than the current speed.
    """
    pts = np.asarray(plan.points, dtype=float)
    tau = dt * np.arange(1, len(pts) + 1)
    ds = np.asarray(d_steer, dtype=float)[:, None]
    dl = np.asarray(d_long, dtype=float)[:, None]
    x = pts[None, :, 0] + 0.5 * dl * cfg.max_accel * tau**2
    curv = np.tan(ds * cfg.max_steer) / cfg.wheelbase
    y = pts[None, :, 1] - 0.5 * (cfg.cruise * tau) ** 2 * curv
    out = np.stack([x, y], axis=-1).tolist()
    return [WaypointPlan(tuple(map(tuple, p))) for p in out]


def _track_map(tracks: Sequence[Track]) -> dict[str, Track]:
    return {t.track_id: t for t in tracks}


def evaluate_policy_offline(
    spec: PolicySpec,
    dataset: Dataset,
    tracks: Sequence[Track],
    settings: StudySettings = StudySettings(),
    member: Optional[int] = None,
) -> Dataset:
    """Fill K samples and the executed action of ``spec`` at every recorded state.

    ``member`` selects an independent noise stream for ensemble members.
    """
    cfg = settings.sim
    by_id = _track_map(tracks)
    names = ("offline", spec.seed, spec.policy_id) + (() if member is None else ("member", member))
    rng = stream(settings.master_seed, *names)
    masks: dict[str, tuple[bool, ...]] = {}
    records = []
    for rec in dataset.records:
        ctx = rec.ctx
        if not ctx or "track" not in ctx:
            raise StudyError(f"record {rec.record_id!r} has no simulator state context")
        track = by_id.get(ctx["track"])
        if track is None:
            raise StudyError(f"record {rec.record_id!r}: unknown track {ctx['track']!r}")
        if track.track_id not in masks:
            mrng = stream(settings.master_seed, "offline-miss", spec.seed, spec.policy_id, track.track_id)
            masks[track.track_id] = draw_misses(spec, len(track.hazards), mrng)
        world = World.restore(track, cfg, ctx["hazards"])
        state = VehicleState(ctx["x"], ctx["y"], ctx["heading"], ctx["speed"])
        base = expert_policy(state, world, ctx["t"], ctx["s"], masks[track.track_id])
        zone = world.any_in_zone(ctx["s"], ctx["t"])
        draws, _ = sample_controls(spec, base, zone, rng)
        actions = [canon_action(to_action(st, lg)) for st, lg in draws]
        executed = canon_action(derive_executed_action(actions))
        plans = None
        if rec.has_waypoints:
            g = rec.gt_action
            plans = [
                WaypointPlan(tuple((canon(px), canon(py)) for px, py in p.points))
                for p in perturb_plans(
                    rec.gt_waypoints,
                    [a.steer - g.steer for a in actions],
                    [a.longitudinal - g.longitudinal for a in actions],
                    settings.waypoint_dt,
                    cfg,
                )
            ]
        records.append(rec.with_predictions(actions, executed, plans))
    return Dataset(DatasetHeader(K=spec.K, W=dataset.header.W), tuple(records))


# -- online episodes -------------------------------------------------------------------


def run_episodes(spec: PolicySpec, tracks: Sequence[Track], settings: StudySettings = StudySettings()) -> list[EpisodeLog]:
    return [rollout(spec, t, settings.sim, settings.master_seed).episode for t in tracks]


# -- study -----------------------------------------------------------------------------


@dataclass
class PolicyOutcome:
    spec: PolicySpec
    predictions: Dataset
    members: list[Dataset]
    episodes: list[EpisodeLog]


@dataclass
class StudyResult:
    expert: Dataset
    specs: list[PolicySpec]
    predictions: dict[str, Dataset]
    episodes: dict[str, list[EpisodeLog]]
    uncertainty: dict[str, UncertaintyEstimate]
    reports: dict[str, MetricReport]
    scores: dict[str, EpisodeScoreSet]
    table: PolicyFamilyTable
    members: dict[str, list[Dataset]] = field(default_factory=dict)


def _policy_work(args) -> PolicyOutcome:
    spec, expert, tracks, settings = args
    try:
        preds = evaluate_policy_offline(spec, expert, tracks, settings)
        members = [preds]
        for m in range(1, settings.ensemble_members):
            members.append(evaluate_policy_offline(spec, expert, tracks, settings, member=m))
        episodes = run_episodes(spec, tracks, settings)
    except (StudyError, SimulationError, ValueError) as exc:
        raise StudyError(f"policy {spec.policy_id!r}: {exc}") from exc
    return PolicyOutcome(spec, preds, members if settings.ensemble_members > 1 else [], episodes)


def policy_uncertainty(
    predictions: dict[str, Dataset],
    members: Optional[dict[str, list[Dataset]]] = None,
    target: Optional[str] = None,
    source: str = "per_policy",
) -> dict[str, UncertaintyEstimate]:
    """Per-policy estimate, or one policy's estimate shared by all (fixed weighting).

    Policies with ensemble ``members`` use the ensemble estimator.
    """
    members = members or {}
    est: dict[str, UncertaintyEstimate] = {}
    for pid, ds in predictions.items():
        tgt = target or default_target(ds)
        if members.get(pid):
            est[pid] = ensemble_uncertainty(members[pid], tgt)
        else:
            est[pid] = estimate_uncertainty(ds, tgt)
    if source == "per_policy":
        return est
    if source.startswith("fixed:"):
        ref = source.split(":", 1)[1]
        if ref not in est:
            raise StudyError(f"uncertainty source policy {ref!r} not in the family")
        return {pid: est[ref] for pid in est}
    raise StudyError(f"unknown uncertainty source {source!r}")


def family_table(
    reports: dict[str, MetricReport],
    scores: dict[str, EpisodeScoreSet],
    online_names: Sequence[str] = PRIMARY_ONLINE,
) -> PolicyFamilyTable:
    offline = {pid: dict(r.values) for pid, r in reports.items()}
    online = {pid: scores[pid].metrics() for pid in reports}
    first = next(iter(reports.values()))
    return PolicyFamilyTable.from_dicts(offline, online, list(first.values), list(online_names))


def run_study(
    family: Sequence[PolicySpec],
    tracks: Sequence[Track],
    settings: StudySettings = StudySettings(),
    jobs: int = 1,
    expert: Optional[Dataset] = None,
) -> StudyResult:
    """Offline metrics and online scores for every policy, assembled into one table.

    Results do not depend on ``jobs``: every policy and track draws from its
    own named stream.
    """
    if len(family) < MIN_POLICIES:
        raise StudyError(f"a study needs at least {MIN_POLICIES} policies, got {len(family)}")
    ids = [p.policy_id for p in family]
    if len(set(ids)) != len(ids):
        raise StudyError("duplicate policy ids in family")
    if expert is None:
        expert = generate_offline_dataset(tracks, settings)
    work = [(spec, expert, list(tracks), settings) for spec in family]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_policy_work, work))
    else:
        results = [_policy_work(w) for w in work]
    outcomes = {o.spec.policy_id: o for o in results}
    est = policy_uncertainty(
        {pid: o.predictions for pid, o in outcomes.items()},
        {pid: o.members for pid, o in outcomes.items()},
        settings.uncertainty_target,
        settings.uncertainty_source,
    )
    catalogue = settings.catalogue()
    reports = {}
    scores = {}
    for pid in sorted(outcomes):
        o = outcomes[pid]
        reports[pid] = metric_report(o.predictions, catalogue, est[pid].aligned_to(o.predictions), pid, skip_degenerate=True)
        scores[pid] = score_set(o.episodes, settings.penalties or DEFAULT_PENALTIES)
    return StudyResult(
        expert=expert,
        specs=list(family),
        predictions={pid: outcomes[pid].predictions for pid in sorted(outcomes)},
        episodes={pid: outcomes[pid].episodes for pid in sorted(outcomes)},
        uncertainty=est,
        reports=reports,
        scores=scores,
        table=family_table(reports, scores),
        members={pid: o.members for pid, o in outcomes.items() if o.members},
    )


def uncertainty_loss_deciles(u: Sequence[float], losses: Sequence[float]) -> tuple[float, float]:
    """Mean loss over the top and the bottom decile of records ranked by uncertainty.

    Ties are broken by record order so the split is deterministic.
    """
    u = np.asarray(u, dtype=float)
    losses = np.asarray(losses, dtype=float)
    n = len(u)
    k = max(1, n // 10)
    order = np.argsort(u, kind="stable")
    return float(losses[order[-k:]].mean()), float(losses[order[:k]].mean())


def steer_losses(dataset: Dataset) -> np.ndarray:
    return record_losses(dataset, LossKernel("steer", "L1"))

