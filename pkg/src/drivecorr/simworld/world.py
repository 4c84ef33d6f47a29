"""Vehicle dynamics, hazard state and the privileged rule-based expert."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

from ..datamodel import Action
from .track import Track


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.05
    wheelbase: float = 2.5
    max_steer_deg: float = 35.0
    v_max: float = 12.0
    cruise: float = 8.0
    a_brake: float = 6.0  # expert planning deceleration
    max_accel: float = 3.0  # full throttle
    max_decel: float = 8.0  # full brake
    drag: float = 0.05  # 1/s, linear speed loss
    lookahead_min: float = 3.0
    lookahead_horizon: float = 0.8  # s
    stop_margin: float = 2.0  # m of extra distance before braking starts
    influence_zone: float = 15.0  # m of arc before a hazard
    ego_radius: float = 1.2
    vehicle_half_width: float = 0.9
    lead_radius: float = 2.5
    pedestrian_radius: float = 0.4
    deviation_limit: float = 30.0
    blocked_time: float = 180.0
    timeout: Optional[float] = None  # default: 200 s + route_length / 2 m/s
    stop_on_collision: bool = True

    @property
    def max_steer(self) -> float:
        return math.radians(self.max_steer_deg)

    def route_timeout(self, route_length: float) -> float:
        return self.timeout if self.timeout is not None else 200.0 + route_length / 2.0


@dataclass
class VehicleState:
    x: float
    y: float
    heading: float  # rad, counter-clockwise from +x
    speed: float

    def check(self, v_max: float) -> None:
        if not all(math.isfinite(v) for v in (self.x, self.y, self.heading, self.speed)):
            raise SimulationError("simulation diverged: non-finite vehicle state")
        if self.speed < 0 or self.speed > v_max + 1e-9:
            raise SimulationError(f"speed {self.speed} outside [0, {v_max}]")


def step_vehicle(st: VehicleState, a: Action, cfg: SimConfig) -> VehicleState:
    """Forward-Euler kinematic bicycle; positive steer turns right (clockwise)."""
    yaw_rate = -(st.speed / cfg.wheelbase) * math.tan(a.steer * cfg.max_steer)
    x = st.x + st.speed * math.cos(st.heading) * cfg.dt
    y = st.y + st.speed * math.sin(st.heading) * cfg.dt
    h = st.heading + yaw_rate * cfg.dt
    h = (h + math.pi) % (2 * math.pi) - math.pi
    acc = a.throttle * cfg.max_accel - a.brake * cfg.max_decel - cfg.drag * st.speed
    v = min(cfg.v_max, max(0.0, st.speed + acc * cfg.dt))
    return VehicleState(x, y, h, v)


# -- hazards -------------------------------------------------------------------------


STOP_OFFSET = 2.5  # ego center stops this far before a stop line
AGENT_STOP_OFFSET = 6.0
LEAD_GAP = 7.0
NUDGE = 0.5  # m the expert shifts away from a parked obstacle


@dataclass
class HazardState:
    """Mutable per-episode state of one hazard; serializable to a small dict."""

    trig_time: Optional[float] = None  # light/agent/lead activation time
    done: bool = False  # removed, crossed, or collided
    stopped: bool = False  # stop sign satisfied

    def to_obj(self) -> dict:
        return {"trig": self.trig_time, "done": self.done, "stopped": self.stopped}

    @classmethod
    def from_obj(cls, obj: dict) -> "HazardState":
        return cls(obj.get("trig"), bool(obj.get("done", False)), bool(obj.get("stopped", False)))


@dataclass(frozen=True)
class HazardView:
    """What the longitudinal planner needs from an active hazard."""

    distance: float  # m from ego center to where it must stop (or follow)
    obj_speed: float  # speed of the thing to stay behind


class World:
    """Hazard bookkeeping for one episode on one track."""

    def __init__(self, track: Track, cfg: SimConfig, states: Optional[Sequence[HazardState]] = None):
        self.track = track
        self.cfg = cfg
        self.hazards = track.hazards
        self.states = list(states) if states is not None else [HazardState() for _ in self.hazards]
        if len(self.states) != len(self.hazards):
            raise SimulationError("hazard state count differs from track hazards")

    def snapshot(self) -> list[dict]:
        return [s.to_obj() for s in self.states]

    @classmethod
    def restore(cls, track: Track, cfg: SimConfig, snap: Sequence[dict]) -> "World":
        return cls(track, cfg, [HazardState.from_obj(o) for o in snap])

    # -- time evolution -------------------------------------------------------------

    def light_phase(self, i: int, t: float) -> str:
        h, st = self.hazards[i], self.states[i]
        if st.trig_time is None:
            return "green"
        dt = t - st.trig_time
        if dt < h.amber:
            return "amber"
        if dt < h.amber + h.red:
            return "red"
        return "green"

    def agent_lateral(self, i: int, t: float) -> float:
        """Signed lateral offset of a crossing agent (left positive)."""
        h, st = self.hazards[i], self.states[i]
        start = h.side * (self.track.lane_half_width + 1.5)
        if st.trig_time is None:
            return start
        return start - h.side * h.speed * (t - st.trig_time)

    def lead_position(self, i: int, t: float) -> float:
        h, st = self.hazards[i], self.states[i]
        return h.s + h.speed * (t - st.trig_time)

    def update_triggers(self, s_ego: float, t: float) -> None:
        for i, h in enumerate(self.hazards):
            st = self.states[i]
            if st.done or st.trig_time is not None:
                continue
            if h.kind == "stop_line" and h.mode == "light" and s_ego >= h.s - h.trigger:
                st.trig_time = t
            elif h.kind in ("crossing_agent", "lead_vehicle") and s_ego >= h.s - h.trigger:
                st.trig_time = t
        for i, h in enumerate(self.hazards):
            st = self.states[i]
            if h.kind == "lead_vehicle" and st.trig_time is not None and not st.done:
                if self.lead_position(i, t) >= h.s + h.travel:
                    st.done = True
            elif h.kind == "crossing_agent" and st.trig_time is not None and not st.done:
                if -h.side * self.agent_lateral(i, t) > self.track.lane_half_width + 1.5:
                    st.done = True

    # -- queries used by the expert -------------------------------------------------

    def reference_s(self, i: int, t: float) -> float:
        h, st = self.hazards[i], self.states[i]
        if h.kind == "lead_vehicle" and st.trig_time is not None and not st.done:
            return self.lead_position(i, t)
        return h.s

    def in_zone(self, i: int, s_ego: float, t: float) -> bool:
        if self.states[i].done:
            return False
        ref = self.reference_s(i, t)
        return ref - self.cfg.influence_zone <= s_ego <= ref

    def any_in_zone(self, s_ego: float, t: float) -> bool:
        return any(self.in_zone(i, s_ego, t) for i in range(len(self.hazards)))

    def active_view(self, i: int, s_ego: float, v: float, t: float) -> Optional[HazardView]:
        """Stopping requirement imposed by hazard ``i``, or None if it does not constrain the ego."""
        h, st = self.hazards[i], self.states[i]
        if st.done:
            return None
        if h.kind == "stop_line":
            if s_ego >= h.s:
                return None
            d = h.s - STOP_OFFSET - s_ego
            if h.mode == "sign":
                return None if st.stopped else HazardView(d, 0.0)
            phase = self.light_phase(i, t)
            if phase == "red":
                return HazardView(d, 0.0)
            if phase == "amber" and d >= v * v / (2 * self.cfg.a_brake):
                return HazardView(d, 0.0)
            return None
        if h.kind == "crossing_agent":
            if st.trig_time is None or s_ego >= h.s:
                return None
            lat = self.agent_lateral(i, t)
            corridor = self.track.lane_half_width + 1.0
            if -h.side * lat > corridor:
                return None
            return HazardView(h.s - AGENT_STOP_OFFSET - s_ego, 0.0)
        if h.kind == "lead_vehicle":
            if st.trig_time is None:
                return None
            sl = self.lead_position(i, t)
            if sl <= s_ego:
                return None
            return HazardView(sl - LEAD_GAP - s_ego, h.speed)
        return None

    def lateral_nudge(self, s_ego: float, mask: Sequence[bool]) -> float:
        shift = 0.0
        for i, h in enumerate(self.hazards):
            if h.kind != "static_obstacle" or mask[i] or self.states[i].done:
                continue
            if h.s - 25.0 <= s_ego <= h.s + 6.0:
                shift += -math.copysign(NUDGE, h.lateral)
        return shift


NO_MASK: tuple = ()


def expert_policy(
    state: VehicleState,
    world: World,
    t: float,
    s_ego: float,
    mask: Sequence[bool] = NO_MASK,
    lat: Optional[float] = None,
) -> Action:
    """Pure-pursuit steering plus a stop-distance longitudinal rule.

    ``mask[i]`` true drops hazard ``i`` from the rule (a blind policy).
    Passing the lateral offset ``lat`` enables the off-track guard.
    """
    cfg = world.cfg
    track = world.track
    if lat is not None and abs(lat) > 4.0 * track.lane_half_width:
        raise SimulationError(f"expert off track by {lat:.2f} m at s={s_ego:.1f}")
    if not mask:
        mask = (False,) * len(world.hazards)
    v = state.speed

    # lateral: pure pursuit toward a lookahead point on the (possibly nudged) centerline
    ld = max(cfg.lookahead_min, 1.5 * v * cfg.lookahead_horizon)
    px, py, ux, uy = track.point_at(s_ego + ld)
    shift = world.lateral_nudge(s_ego, mask)
    if shift:
        px -= uy * shift
        py += ux * shift
    dx, dy = px - state.x, py - state.y
    dist = math.hypot(dx, dy)
    if dist < 1e-6:
        steer = 0.0
    else:
        alpha = math.atan2(dy, dx) - state.heading
        alpha = (alpha + math.pi) % (2 * math.pi) - math.pi
        delta = math.atan(2.0 * cfg.wheelbase * math.sin(alpha) / dist)
        steer = -delta / cfg.max_steer
    steer = min(1.0, max(-1.0, steer))

    # longitudinal: brake ramp before any active hazard, cruise control otherwise
    a_req = 0.0
    v_cap = cfg.cruise
    hold = False
    for i in range(len(world.hazards)):
        if mask[i]:
            continue
        view = world.active_view(i, s_ego, v, t)
        if view is None:
            continue
        d, vo = view.distance, view.obj_speed
        if vo == 0.0 and d <= 1.0:
            hold = True
            continue
        v_cap = min(v_cap, vo + 1.0 * max(0.0, d))
        if v > vo:
            need = (v * v - vo * vo) / (2 * cfg.a_brake) + cfg.stop_margin
            if d <= need:
                a_req = max(a_req, (v * v - vo * vo) / (2 * max(d, 0.05)))
    if hold:
        return Action(steer, 0.0, 1.0)
    if a_req > 0.0:
        return Action(steer, 0.0, min(1.0, a_req / cfg.max_decel))
    err = v_cap - v
    if err >= -0.5:
        throttle = 0.6 * err + cfg.drag * v / cfg.max_accel
        return Action(steer, min(1.0, max(0.0, throttle)), 0.0)
    return Action(steer, 0.0, min(1.0, -0.3 * err))


def initial_state(track: Track) -> VehicleState:
    x, y, ux, uy = track.point_at(0.0)
    return VehicleState(x, y, math.atan2(uy, ux), 0.0)

