"""Closed-loop episode logs and the online metric catalogue (Driving Score etc.)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .textio import ParseError, iter_lines, write_csv, write_lines

EVENT_KINDS = (
    "collision_pedestrian",
    "collision_vehicle",
    "collision_static",
    "red_light",
    "stop_sign",
    "outside_route_lane",
    "route_deviation",
    "route_timeout",
    "vehicle_blocked",
)
TERMINALS = ("finished", "deviation", "timeout", "blocked", "collision_stop")
COLLISION_KINDS = ("collision_pedestrian", "collision_vehicle", "collision_static")

# CARLA leaderboard convention
DEFAULT_PENALTIES: dict[str, float] = {
    "collision_pedestrian": 0.50,
    "collision_vehicle": 0.60,
    "collision_static": 0.65,
    "red_light": 0.70,
    "stop_sign": 0.80,
}

# online metrics used for correlation by default, in report order
PRIMARY_ONLINE = (
    "driving_score",
    "success_rate",
    "route_completion",
    "infractions_per_km",
    "collisions_all_per_km",
    "collisions_vehicle_per_km",
    "collisions_environment_per_km",
    "red_light_per_km",
    "stop_sign_per_km",
)


class EpisodeError(ValueError):
    pass


@dataclass(frozen=True)
class InfractionEvent:
    kind: str
    time: float
    length: float = 0.0  # meters driven outside the route lane

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise EpisodeError(f"unknown event kind {self.kind!r}")
        if not math.isfinite(self.time) or self.time < 0:
            raise EpisodeError(f"event time must be finite and >= 0, got {self.time}")
        if not math.isfinite(self.length) or self.length < 0:
            raise EpisodeError(f"event length must be finite and >= 0, got {self.length}")


@dataclass(frozen=True)
class EpisodeLog:
    route_id: str
    route_length: float
    completed_length: float
    duration: float
    terminal: str
    events: tuple[InfractionEvent, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        if not self.route_length > 0:
            raise EpisodeError(f"route {self.route_id!r}: route_length must be > 0")
        if not 0 <= self.completed_length <= self.route_length:
            raise EpisodeError(f"route {self.route_id!r}: completed_length must lie in [0, route_length]")
        if not (math.isfinite(self.duration) and self.duration >= 0):
            raise EpisodeError(f"route {self.route_id!r}: duration must be finite and >= 0")
        if self.terminal not in TERMINALS:
            raise EpisodeError(f"route {self.route_id!r}: unknown terminal state {self.terminal!r}")
        times = [e.time for e in self.events]
        if times != sorted(times):
            raise EpisodeError(f"route {self.route_id!r}: events must be time-ordered")
        if times and times[-1] > self.duration + 1e-9:
            raise EpisodeError(f"route {self.route_id!r}: event after end of episode")

    @property
    def completion(self) -> float:
        return self.completed_length / self.route_length

    @property
    def success(self) -> bool:
        return self.terminal == "finished" and self.completed_length == self.route_length


def infraction_penalty(episode: EpisodeLog, coeffs: Mapping[str, float] = DEFAULT_PENALTIES) -> float:
    """Multiplicative penalty P in (0, 1]; repeated infractions compound."""
    p = 1.0
    for e in episode.events:
        if e.kind == "outside_route_lane":
            p *= 1.0 - min(e.length, episode.route_length) / episode.route_length
        elif e.kind in coeffs:
            p *= coeffs[e.kind]
        elif e.kind not in EVENT_KINDS:
            raise EpisodeError(f"unknown event kind {e.kind!r}")
    return p


def driving_score(episodes: Sequence[EpisodeLog], coeffs: Mapping[str, float] = DEFAULT_PENALTIES) -> float:
    if not episodes:
        raise EpisodeError("driving score needs at least one episode")
    return math.fsum(ep.completion * infraction_penalty(ep, coeffs) for ep in episodes) / len(episodes)


@dataclass
class EpisodeScoreSet:
    driving_score: float
    success_rate: float
    route_completion: float
    counts: dict[str, int]
    per_km: dict[str, Optional[float]]
    penalties: list[float]
    completions: list[float]
    n_routes: int
    completed_km: float = 0.0
    extra: dict[str, float] = field(default_factory=dict)

    def metrics(self) -> dict[str, Optional[float]]:
        """Flat online metric vector; per-km rates are ``None`` without distance."""
        out: dict[str, Optional[float]] = {
            "driving_score": self.driving_score,
            "success_rate": self.success_rate,
            "route_completion": self.route_completion,
        }
        for k, v in self.per_km.items():
            out[f"{k}_per_km"] = v
        for k, v in self.counts.items():
            out[f"{k}_count"] = float(v)
        return out

    def rows(self, policy_id: str) -> list[tuple[str, str, Optional[float]]]:
        return [(policy_id, k, v) for k, v in self.metrics().items()]


def _aggregate_counts(episodes: Sequence[EpisodeLog]) -> dict[str, int]:
    c = {k: 0 for k in EVENT_KINDS}
    for ep in episodes:
        for e in ep.events:
            c[e.kind] += 1
    counts = {
        "infractions": sum(c.values()),
        "collisions_all": sum(c[k] for k in COLLISION_KINDS),
        "collisions_vehicle": c["collision_vehicle"],
        "collisions_environment": c["collision_static"],
        "collisions_pedestrian": c["collision_pedestrian"],
        "red_light": c["red_light"],
        "stop_sign": c["stop_sign"],
        "outside_route_lane": c["outside_route_lane"],
        "route_deviation": c["route_deviation"],
        "route_timeout": c["route_timeout"],
        "vehicle_blocked": c["vehicle_blocked"],
    }
    return counts


def score_set(episodes: Sequence[EpisodeLog], coeffs: Mapping[str, float] = DEFAULT_PENALTIES) -> EpisodeScoreSet:
    if not episodes:
        raise EpisodeError("scoring needs at least one episode")
    n = len(episodes)
    penalties = [infraction_penalty(ep, coeffs) for ep in episodes]
    completions = [ep.completion for ep in episodes]
    ds = math.fsum(r * p for r, p in zip(completions, penalties)) / n
    sr = sum(1 for ep in episodes if ep.success) / n
    rc = math.fsum(completions) / n
    counts = _aggregate_counts(episodes)
    km = math.fsum(ep.completed_length for ep in episodes) / 1000.0
    per_km = {k: (v / km if km > 0 else None) for k, v in counts.items()}
    return EpisodeScoreSet(ds, sr, rc, counts, per_km, penalties, completions, n, km)


# -- files ---------------------------------------------------------------------------


def episode_to_obj(ep: EpisodeLog) -> dict:
    events = []
    for e in ep.events:
        d: dict = {"kind": e.kind, "time": e.time}
        if e.kind == "outside_route_lane":
            d["length"] = e.length
        events.append(d)
    return {
        "route_id": ep.route_id,
        "route_length": ep.route_length,
        "completed_length": ep.completed_length,
        "duration": ep.duration,
        "terminal": ep.terminal,
        "events": events,
    }


def episode_from_obj(obj: dict) -> EpisodeLog:
    required = ("route_id", "route_length", "completed_length", "duration", "terminal", "events")
    missing = [k for k in required if k not in obj]
    if missing:
        raise EpisodeError(f"missing key(s) {missing}")
    if not isinstance(obj["events"], list):
        raise EpisodeError("events must be an array")
    try:
        events = tuple(
            InfractionEvent(str(e["kind"]), float(e["time"]), float(e.get("length", 0.0))) for e in obj["events"]
        )
        return EpisodeLog(
            str(obj["route_id"]),
            float(obj["route_length"]),
            float(obj["completed_length"]),
            float(obj["duration"]),
            str(obj["terminal"]),
            events,
        )
    except (KeyError, TypeError, AttributeError):
        raise EpisodeError("malformed episode or event object") from None


def load_episodes(path: str | Path) -> list[EpisodeLog]:
    out = []
    for line_no, obj in iter_lines(path):
        try:
            out.append(episode_from_obj(obj))
        except (EpisodeError, ValueError) as exc:
            raise ParseError(path, line_no, str(exc)) from None
    if not out:
        raise EpisodeError(f"{path}: no episodes")
    return out


def save_episodes(episodes: Sequence[EpisodeLog], path: str | Path) -> None:
    write_lines(path, [episode_to_obj(ep) for ep in episodes])


def write_score_csv(path: str | Path, score_sets: Mapping[str, EpisodeScoreSet]) -> None:
    rows = []
    for pid in sorted(score_sets):
        rows.extend(score_sets[pid].rows(pid))
    write_csv(path, ["policy_id", "online_metric", "value"], rows)
