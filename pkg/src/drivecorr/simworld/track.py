"""Routes: a sampled centerline with arc-length lookup and the hazards placed on it."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..textio import ParseError, iter_lines

SAMPLE_SPACING = 0.5  # m between centerline samples
HAZARD_KINDS = ("stop_line", "crossing_agent", "static_obstacle", "lead_vehicle")


class TrackError(ValueError):
    pass


@dataclass(frozen=True)
class Hazard:
    """A scripted event at arc position ``s`` along the route.

    stop_line: ``mode`` "light" turns amber ``trigger`` m before the ego
        reaches it, stays amber for ``amber`` s then red for ``red`` s;
        ``mode`` "sign" requires a full stop.
    crossing_agent: a pedestrian at the curb on ``side`` (+1 left, -1 right)
        starts crossing at ``speed`` when the ego is ``trigger`` m away.
    static_obstacle: parked object at signed ``lateral`` offset with ``radius``.
    lead_vehicle: slower car appearing at ``s`` when the ego is ``trigger`` m
        behind, driving at ``speed`` for ``travel`` m before turning off.
    """

    kind: str
    s: float
    mode: str = "light"
    trigger: float = 25.0
    amber: float = 2.0
    red: float = 6.0
    speed: float = 1.5
    side: int = 1
    lateral: float = 2.6
    radius: float = 0.7
    travel: float = 60.0

    def __post_init__(self):
        if self.kind not in HAZARD_KINDS:
            raise TrackError(f"unknown hazard kind {self.kind!r}")
        if self.kind == "stop_line" and self.mode not in ("light", "sign"):
            raise TrackError(f"stop_line mode must be 'light' or 'sign', got {self.mode!r}")
        if self.side not in (-1, 1):
            raise TrackError("hazard side must be +1 or -1")

    def to_obj(self) -> dict:
        base = {"kind": self.kind, "s": self.s}
        keys = {
            "stop_line": ("mode", "trigger", "amber", "red"),
            "crossing_agent": ("trigger", "speed", "side"),
            "static_obstacle": ("lateral", "radius"),
            "lead_vehicle": ("trigger", "speed", "travel"),
        }[self.kind]
        base.update({k: getattr(self, k) for k in keys})
        return base


@dataclass(frozen=True)
class Track:
    track_id: str
    centerline: np.ndarray  # (M, 2)
    lane_half_width: float
    hazards: tuple[Hazard, ...] = ()
    segments: tuple = field(default=(), compare=False)
    start: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        pts = np.asarray(self.centerline, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise TrackError(f"track {self.track_id!r}: centerline needs at least two (x, y) points")
        if not np.all(np.isfinite(pts)):
            raise TrackError(f"track {self.track_id!r}: non-finite centerline")
        seg = np.hypot(*np.diff(pts, axis=0).T)
        if np.any(seg <= 0):
            raise TrackError(f"track {self.track_id!r}: repeated centerline points")
        s = np.concatenate([[0.0], np.cumsum(seg)])
        object.__setattr__(self, "centerline", pts)
        object.__setattr__(self, "hazards", tuple(sorted(self.hazards, key=lambda h: h.s)))
        object.__setattr__(self, "_s", s)
        object.__setattr__(self, "_xs", pts[:, 0].tolist())
        object.__setattr__(self, "_ys", pts[:, 1].tolist())
        object.__setattr__(self, "_sl", s.tolist())
        ux = (np.diff(pts[:, 0]) / seg).tolist()
        uy = (np.diff(pts[:, 1]) / seg).tolist()
        object.__setattr__(self, "_ux", ux + [ux[-1]])
        object.__setattr__(self, "_uy", uy + [uy[-1]])
        if not self.lane_half_width > 0:
            raise TrackError(f"track {self.track_id!r}: lane_half_width must be > 0")
        for h in self.hazards:
            if not 0 <= h.s <= self.route_length:
                raise TrackError(f"track {self.track_id!r}: hazard at s={h.s} outside [0, {self.route_length:.1f}]")
        self._check_simple()

    @property
    def route_length(self) -> float:
        return float(self._s[-1])

    def _check_simple(self) -> None:
        # subsample every ~2 m; points far apart along the route must stay
        # more than a lane width apart in the plane
        step = max(1, int(round(2.0 / SAMPLE_SPACING)))
        idx = np.arange(0, len(self.centerline), step)
        p = self.centerline[idx]
        s = self._s[idx]
        d = np.hypot(p[:, None, 0] - p[None, :, 0], p[:, None, 1] - p[None, :, 1])
        ds = np.abs(s[:, None] - s[None, :])
        bad = (ds > 8 * self.lane_half_width) & (d < 4 * self.lane_half_width)
        if np.any(bad):
            raise TrackError(f"track {self.track_id!r}: centerline self-intersects at lane scale")

    # -- geometry queries (scalar, hot path) ---------------------------------------

    def point_at(self, s: float) -> tuple[float, float, float, float]:
        """Centerline point and unit tangent at arc ``s``; extrapolates past either end."""
        sl = self._sl
        n = len(sl)
        if s <= 0.0:
            i = 0
        elif s >= sl[-1]:
            i = n - 2
        else:
            i = min(n - 2, int(s / SAMPLE_SPACING))
            while i > 0 and sl[i] > s:
                i -= 1
            while i < n - 2 and sl[i + 1] < s:
                i += 1
        t = s - sl[i]
        ux, uy = self._ux[i], self._uy[i]
        return self._xs[i] + ux * t, self._ys[i] + uy * t, ux, uy

    def project(self, x: float, y: float, hint: int) -> tuple[float, float, int]:
        """Arc position, signed lateral offset (left positive) and sample index near ``hint``."""
        xs, ys = self._xs, self._ys
        n = len(xs)
        lo = max(0, hint - 8)
        hi = min(n - 1, hint + 16)
        best, bi = math.inf, lo
        for i in range(lo, hi + 1):
            d = (xs[i] - x) ** 2 + (ys[i] - y) ** 2
            if d < best:
                best, bi = d, i
        i = bi if bi < n - 1 else n - 2
        ux, uy = self._ux[i], self._uy[i]
        dx, dy = x - xs[i], y - ys[i]
        t = dx * ux + dy * uy
        if t < 0 and i > 0:
            i -= 1
            ux, uy = self._ux[i], self._uy[i]
            dx, dy = x - xs[i], y - ys[i]
            t = dx * ux + dy * uy
        s = self._sl[i] + t
        lat = ux * dy - uy * dx
        return s, lat, bi

    def global_project(self, x: float, y: float) -> tuple[float, float, int]:
        d = (self.centerline[:, 0] - x) ** 2 + (self.centerline[:, 1] - y) ** 2
        return self.project(x, y, int(np.argmin(d)))

    def heading_at(self, s: float) -> float:
        _, _, ux, uy = self.point_at(s)
        return math.atan2(uy, ux)

    # -- serialization ---------------------------------------------------------------

    def to_obj(self) -> dict:
        obj: dict = {"track_id": self.track_id, "lane_half_width": self.lane_half_width}
        if self.segments:
            obj["start"] = list(self.start)
            obj["segments"] = [list(sg) for sg in self.segments]
        else:
            obj["centerline"] = self.centerline.tolist()
        obj["hazards"] = [h.to_obj() for h in self.hazards]
        return obj


def build_centerline(segments: Sequence[Sequence], start: Sequence[float] = (0.0, 0.0, 0.0)) -> np.ndarray:
    """Sample ``["straight", length]`` and ``["arc", radius, degrees]`` pieces (positive degrees turn left)."""
    x, y, h = (float(v) for v in start)
    pts = [(x, y)]
    for sg in segments:
        kind = sg[0]
        if kind == "straight":
            length = float(sg[1])
            if length <= 0:
                raise TrackError("straight segment length must be > 0")
            n = max(1, int(round(length / SAMPLE_SPACING)))
            step = length / n
            for _ in range(n):
                x += step * math.cos(h)
                y += step * math.sin(h)
                pts.append((x, y))
        elif kind == "arc":
            radius, deg = float(sg[1]), float(sg[2])
            if radius <= 0 or deg == 0:
                raise TrackError("arc needs radius > 0 and a nonzero angle")
            sweep = math.radians(deg)
            length = radius * abs(sweep)
            n = max(1, int(round(length / SAMPLE_SPACING)))
            dh = sweep / n
            sign = 1.0 if sweep > 0 else -1.0
            cx = x - sign * radius * math.sin(h)
            cy = y + sign * radius * math.cos(h)
            for _ in range(n):
                h += dh
                x = cx + sign * radius * math.sin(h)
                y = cy - sign * radius * math.cos(h)
                pts.append((x, y))
        else:
            raise TrackError(f"unknown segment kind {kind!r}")
    return np.array(pts)


def track_from_obj(obj: dict) -> Track:
    try:
        tid = str(obj["track_id"])
        hw = float(obj.get("lane_half_width", 2.0))
        hazards = tuple(Hazard(**h) for h in obj.get("hazards", []))
    except (KeyError, TypeError) as exc:
        raise TrackError(f"malformed track object: {exc}") from None
    if "segments" in obj:
        start = tuple(float(v) for v in obj.get("start", (0.0, 0.0, 0.0)))
        segs = tuple(tuple(sg) for sg in obj["segments"])
        return Track(tid, build_centerline(segs, start), hw, hazards, segs, start)
    if "centerline" in obj:
        return Track(tid, np.asarray(obj["centerline"], dtype=float), hw, hazards)
    raise TrackError(f"track {tid!r} needs 'segments' or 'centerline'")


def load_tracks(path: str | Path) -> list[Track]:
    out = []
    for line_no, obj in iter_lines(path):
        try:
            out.append(track_from_obj(obj))
        except TrackError as exc:
            raise ParseError(path, line_no, str(exc)) from None
    if not out:
        raise TrackError(f"{path}: no tracks")
    ids = [t.track_id for t in out]
    if len(set(ids)) != len(ids):
        raise TrackError(f"{path}: duplicate track ids")
    return out


def bundled_tracks_path() -> Path:
    return Path(__file__).parent / "data" / "tracks.jsonl"


def bundled_tracks() -> list[Track]:
    return load_tracks(bundled_tracks_path())


def straight_track(length: float = 200.0, hazards: Sequence[Hazard] = (), track_id: str = "straight", lane_half_width: float = 2.0) -> Track:
    segs = (("straight", float(length)),)
    return Track(track_id, build_centerline(segs), lane_half_width, tuple(hazards), segs)


def find_track(tracks: Sequence[Track], track_id: str) -> Optional[Track]:
    for t in tracks:
        if t.track_id == track_id:
            return t
    return None
