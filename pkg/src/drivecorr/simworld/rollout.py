"""Closed-loop episodes: integrate a controller on a track and log infractions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from ..datamodel import Action
from ..online_scoring import EpisodeLog, InfractionEvent
from .policy import PolicySpec, draw_misses, executed_action, policy_samples, stream
from .track import Track
from .world import STOP_OFFSET, SimConfig, SimulationError, VehicleState, World, expert_policy, initial_state, step_vehicle

FINISH_TOLERANCE = 0.25  # m short of the route end that still counts as arrived
STOP_SPEED = 0.1  # m/s below which the ego counts as stationary
SIGN_STOP_WINDOW = 3.0  # m before the stop position in which a stop satisfies a sign


Controller = Callable[[VehicleState, World, float, float, float], Action]


class Expert:
    """Marker for the privileged expert as a rollout driver."""

    policy_id = "expert"


EXPERT = Expert()


@dataclass(frozen=True)
class TraceStep:
    step: int
    t: float
    state: tuple[float, float, float, float]  # x, y, heading, speed
    s: float
    lat: float
    hazards: list  # world snapshot before acting
    action: Action


@dataclass
class RolloutResult:
    episode: EpisodeLog
    trace: Optional[list[TraceStep]] = None


def _spec_controller(spec: PolicySpec, track: Track, master_seed: int) -> Controller:
    rng = stream(master_seed, "online", spec.seed, spec.policy_id, track.track_id)
    mask = draw_misses(spec, len(track.hazards), rng)

    def control(state, world, t, s, lat):
        return executed_action(policy_samples(spec, state, world, t, s, rng, mask))

    return control


def _expert_controller(state, world, t, s, lat):
    return expert_policy(state, world, t, s, lat=lat)


def _collides(track: Track, world: World, i: int, state: VehicleState, t: float) -> bool:
    h, st = world.hazards[i], world.states[i]
    cfg = world.cfg
    if st.done:
        return False
    if h.kind == "crossing_agent":
        if st.trig_time is None:
            return False
        px, py, ux, uy = track.point_at(h.s)
        lat = world.agent_lateral(i, t)
        px, py = px - uy * lat, py + ux * lat
        reach = cfg.ego_radius + cfg.pedestrian_radius
    elif h.kind == "static_obstacle":
        px, py, ux, uy = track.point_at(h.s)
        px, py = px - uy * h.lateral, py + ux * h.lateral
        reach = cfg.ego_radius + h.radius
    elif h.kind == "lead_vehicle":
        if st.trig_time is None:
            return False
        px, py, _, _ = track.point_at(world.lead_position(i, t))
        reach = cfg.ego_radius + cfg.lead_radius
    else:
        return False
    return (px - state.x) ** 2 + (py - state.y) ** 2 < reach * reach


_COLLISION_KIND = {
    "crossing_agent": "collision_pedestrian",
    "static_obstacle": "collision_static",
    "lead_vehicle": "collision_vehicle",
}


def rollout(
    driver: Union[PolicySpec, Expert, Controller],
    track: Track,
    cfg: SimConfig = SimConfig(),
    master_seed: int = 0,
    trace: bool = False,
) -> RolloutResult:
    """Drive ``track`` until finish, deviation, timeout or blocking.

    ``driver`` is a PolicySpec (seeded from ``master_seed``), :data:`EXPERT`,
    or any callable ``(state, world, t, s, lat) -> Action``.
    """
    if isinstance(driver, PolicySpec):
        control = _spec_controller(driver, track, master_seed)
    elif isinstance(driver, Expert):
        control = _expert_controller
    else:
        control = driver

    world = World(track, cfg)
    L = track.route_length
    hw = track.lane_half_width
    limit = cfg.route_timeout(L)
    state = initial_state(track)
    s, lat, hint = track.project(state.x, state.y, 0)
    world.update_triggers(s, 0.0)

    events: list[InfractionEvent] = []
    steps: Optional[list[TraceStep]] = [] if trace else None
    completed = 0.0
    still_steps = 0
    out_start: Optional[float] = None
    out_len = 0.0
    terminal = None
    n = 0
    t = 0.0

    while terminal is None:
        action = control(state, world, t, s, lat)
        if steps is not None:
            steps.append(TraceStep(n, t, (state.x, state.y, state.heading, state.speed), s, lat, world.snapshot(), action))
        new = step_vehicle_checked(state, action, cfg, n)
        n += 1
        t = n * cfg.dt
        s_new, lat_new, hint = track.project(new.x, new.y, hint)
        world.update_triggers(s_new, t)

        for i, h in enumerate(world.hazards):
            st = world.states[i]
            if h.kind != "stop_line" or st.done:
                continue
            if h.mode == "sign" and not st.stopped and new.speed < STOP_SPEED:
                if h.s - STOP_OFFSET - SIGN_STOP_WINDOW <= s_new <= h.s:
                    st.stopped = True
            if s < h.s <= s_new:
                if h.mode == "light" and world.light_phase(i, t) == "red":
                    events.append(InfractionEvent("red_light", t))
                elif h.mode == "sign" and not st.stopped:
                    events.append(InfractionEvent("stop_sign", t))
                st.done = True

        for i, h in enumerate(world.hazards):
            if _collides(track, world, i, new, t):
                events.append(InfractionEvent(_COLLISION_KIND[h.kind], t))
                world.states[i].done = True
                new = VehicleState(new.x, new.y, new.heading, 0.0)
                if cfg.stop_on_collision:
                    terminal = "collision_stop"

        outside = abs(lat_new) > hw - cfg.vehicle_half_width
        if outside:
            if out_start is None:
                out_start, out_len = t, 0.0
            out_len += max(0.0, s_new - s)
        elif out_start is not None:
            events.append(InfractionEvent("outside_route_lane", out_start, out_len))
            out_start = None

        completed = max(completed, min(L, max(0.0, s_new)))
        still_steps = still_steps + 1 if new.speed < STOP_SPEED else 0
        state, s, lat = new, s_new, lat_new

        if terminal is not None:
            pass
        elif s >= L - FINISH_TOLERANCE and abs(lat) <= cfg.deviation_limit:
            terminal = "finished"
            completed = L
        elif abs(lat) > cfg.deviation_limit:
            terminal = "deviation"
            events.append(InfractionEvent("route_deviation", t))
        elif still_steps * cfg.dt >= cfg.blocked_time - 1e-9:
            terminal = "blocked"
            events.append(InfractionEvent("vehicle_blocked", t))
        elif t >= limit - 1e-9:
            terminal = "timeout"
            events.append(InfractionEvent("route_timeout", t))

    if out_start is not None:
        events.append(InfractionEvent("outside_route_lane", out_start, out_len))
    events.sort(key=lambda e: e.time)
    ep = EpisodeLog(track.track_id, L, completed, t, terminal, tuple(events))
    return RolloutResult(ep, steps)


def step_vehicle_checked(state: VehicleState, action: Action, cfg: SimConfig, n: int) -> VehicleState:
    new = step_vehicle(state, action, cfg)
    try:
        new.check(cfg.v_max)
    except SimulationError as exc:
        raise SimulationError(f"{exc} at step {n}") from None
    return new


def positions(trace: list[TraceStep]) -> np.ndarray:
    return np.array([[st.state[0], st.state[1]] for st in trace])
