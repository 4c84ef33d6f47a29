"""Offline/online correlation analysis across a family of policies."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .textio import fmt_float, write_csv

MIN_POLICIES = 3


class DegenerateSeriesError(ValueError):
    def __init__(self, detail: str = ""):
        super().__init__("degenerate series" + (f": {detail}" if detail else ""))


def _check_pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValueError(f"series must be 1-D with equal length, got {x.shape} and {y.shape}")
    if len(x) < MIN_POLICIES:
        raise ValueError(f"need at least {MIN_POLICIES} points, got {len(x)}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("series contain non-finite values")
    return x, y


def pearson(x, y) -> float:
    """Product-moment correlation, computed from centered series."""
    x, y = _check_pair(x, y)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateSeriesError("zero variance")
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def spearman(x, y) -> float:
    """Pearson correlation of average ranks (ties share their mean rank)."""
    x, y = _check_pair(x, y)
    return pearson(rankdata(x, method="average"), rankdata(y, method="average"))


STATS = {"pearson": pearson, "spearman": spearman}


@dataclass(frozen=True)
class BootstrapResult:
    lo: float
    hi: float
    used: int
    skipped: int


def bootstrap_ci(
    x,
    y,
    stat: str = "pearson",
    B: int = 1000,
    seed: int | Sequence[int] = 0,
    level: float = 0.95,
) -> BootstrapResult:
    """Percentile interval over ``B`` paired resamples drawn from a seeded stream.

    Resamples where either series collapses to a constant are skipped and
    counted.
    """
    x, y = _check_pair(x, y)
    if B < 100:
        raise ValueError("bootstrap needs B >= 100 resamples")
    if stat not in STATS:
        raise ValueError(f"unknown statistic {stat!r}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n = len(x)
    idx = rng.integers(0, n, size=(B, n))
    xs, ys = x[idx], y[idx]
    if stat == "spearman":
        xs = rankdata(xs, method="average", axis=1)
        ys = rankdata(ys, method="average", axis=1)
    dx = xs - xs.mean(axis=1, keepdims=True)
    dy = ys - ys.mean(axis=1, keepdims=True)
    sxx = np.einsum("ij,ij->i", dx, dx)
    syy = np.einsum("ij,ij->i", dy, dy)
    sxy = np.einsum("ij,ij->i", dx, dy)
    # a resample that repeats one point (or one value) has no correlation
    ok = (sxx > 0) & (syy > 0) & (np.ptp(xs, axis=1) > 0) & (np.ptp(ys, axis=1) > 0)
    skipped = int(B - ok.sum())
    vals = np.clip(sxy[ok] / np.sqrt(sxx[ok] * syy[ok]), -1.0, 1.0)
    if vals.size == 0:
        raise DegenerateSeriesError("every bootstrap resample was degenerate")
    a = (1.0 - level) / 2.0
    lo, hi = np.quantile(vals, [a, 1.0 - a])
    return BootstrapResult(float(lo), float(hi), len(vals), skipped)


# -- policy family tables ------------------------------------------------------------


@dataclass
class PolicyFamilyTable:
    policies: list[str]
    offline_names: list[str]
    online_names: list[str]
    offline: np.ndarray  # (P, n_offline); NaN = missing
    online: np.ndarray  # (P, n_online); NaN = missing

    def __post_init__(self):
        self.offline = np.asarray(self.offline, dtype=float).reshape(len(self.policies), len(self.offline_names))
        self.online = np.asarray(self.online, dtype=float).reshape(len(self.policies), len(self.online_names))
        if len(set(self.policies)) != len(self.policies):
            raise ValueError("duplicate policy ids")

    @classmethod
    def from_dicts(
        cls,
        offline: dict[str, dict[str, Optional[float]]],
        online: dict[str, dict[str, Optional[float]]],
        offline_names: Optional[Sequence[str]] = None,
        online_names: Optional[Sequence[str]] = None,
    ) -> "PolicyFamilyTable":
        policies = sorted(offline)
        if sorted(online) != policies:
            raise ValueError("offline and online tables cover different policies")
        off_names = list(offline_names or next(iter(offline.values())).keys())
        on_names = list(online_names or next(iter(online.values())).keys())

        def cell(d, name):
            v = d.get(name)
            return math.nan if v is None else float(v)

        off = [[cell(offline[p], n) for n in off_names] for p in policies]
        on = [[cell(online[p], n) for n in on_names] for p in policies]
        return cls(policies, off_names, on_names, np.array(off), np.array(on))

    def sorted(self) -> "PolicyFamilyTable":
        order = sorted(range(len(self.policies)), key=lambda i: self.policies[i])
        return PolicyFamilyTable(
            [self.policies[i] for i in order],
            list(self.offline_names),
            list(self.online_names),
            self.offline[order],
            self.online[order],
        )

    def offline_column(self, name: str) -> np.ndarray:
        return self.offline[:, self.offline_names.index(name)]

    def online_column(self, name: str) -> np.ndarray:
        return self.online[:, self.online_names.index(name)]

    def with_offline(self, name: str, values: Sequence[float]) -> "PolicyFamilyTable":
        values = np.asarray(values, dtype=float).reshape(-1, 1)
        if name in self.offline_names:
            raise ValueError(f"offline metric {name!r} already present")
        return PolicyFamilyTable(
            list(self.policies),
            self.offline_names + [name],
            list(self.online_names),
            np.hstack([self.offline, values]),
            self.online.copy(),
        )


@dataclass(frozen=True)
class CorrelationConfig:
    primary_online: str = "driving_score"
    B: int = 1000
    seed: int = 42
    ci_stat: str = "pearson"
    level: float = 0.95


@dataclass(frozen=True)
class CorrelationEntry:
    offline: str
    online: str
    n: int
    pearson: Optional[float]
    spearman: Optional[float]
    ci_lo: Optional[float]
    ci_hi: Optional[float]
    skipped: int = 0
    status: str = "ok"

    @property
    def abs_pearson(self) -> Optional[float]:
        return None if self.pearson is None else abs(self.pearson)

    @property
    def sign(self) -> Optional[int]:
        if self.pearson is None:
            return None
        return 1 if self.pearson > 0 else (-1 if self.pearson < 0 else 0)


@dataclass
class CorrelationReport:
    entries: list[CorrelationEntry]
    primary_online: str
    offline_order: list[str] = field(default_factory=list)

    def get(self, offline: str, online: str) -> CorrelationEntry:
        for e in self.entries:
            if e.offline == offline and e.online == online:
                return e
        raise KeyError((offline, online))

    CSV_HEADER = ["offline_metric", "online_metric", "n", "abs_pearson", "sign", "pearson", "spearman", "ci_lo", "ci_hi", "skipped", "status"]

    def rows(self) -> list[list]:
        return [
            [e.offline, e.online, e.n, e.abs_pearson, e.sign, e.pearson, e.spearman, e.ci_lo, e.ci_hi, e.skipped, e.status]
            for e in self.entries
        ]

    def to_csv(self, path: str | Path) -> None:
        write_csv(path, self.CSV_HEADER, self.rows())


def _cell(
    table: PolicyFamilyTable,
    i: int,
    j: int,
    cfg: CorrelationConfig,
) -> CorrelationEntry:
    off_name, on_name = table.offline_names[i], table.online_names[j]
    x = table.offline[:, i]
    y = table.online[:, j]
    mask = np.isfinite(x) & np.isfinite(y)
    n = int(mask.sum())
    if n < len(x):
        return CorrelationEntry(off_name, on_name, n, None, None, None, None, 0, "missing values")
    if n < MIN_POLICIES:
        return CorrelationEntry(off_name, on_name, n, None, None, None, None, 0, "too few policies")
    try:
        r = pearson(x, y)
        rho = spearman(x, y)
    except DegenerateSeriesError:
        which = "offline" if np.std(x) == 0 else "online"
        return CorrelationEntry(off_name, on_name, n, None, None, None, None, 0, f"degenerate {which} column")
    ci = bootstrap_ci(x, y, cfg.ci_stat, cfg.B, seed=[cfg.seed, i, j], level=cfg.level)
    point = r if cfg.ci_stat == "pearson" else rho
    # percentile intervals can miss the point estimate on tiny or skewed samples
    lo, hi = min(ci.lo, point), max(ci.hi, point)
    return CorrelationEntry(off_name, on_name, n, r, rho, lo, hi, ci.skipped)


def correlate(table: PolicyFamilyTable, config: CorrelationConfig = CorrelationConfig(), jobs: int = 1) -> CorrelationReport:
    """Full offline x online matrix of correlation entries.

    Offline metrics are ordered by |pearson| against ``config.primary_online``
    (descending, degenerate last, then by name); within an offline metric the
    online metrics keep table order.
    """
    if len(table.policies) < MIN_POLICIES:
        raise ValueError(f"correlation needs at least {MIN_POLICIES} policies")
    if config.primary_online not in table.online_names:
        raise ValueError(f"primary online metric {config.primary_online!r} not in table")
    t = table.sorted()
    cells = [(i, j) for i in range(len(t.offline_names)) for j in range(len(t.online_names))]
    if jobs > 1 and len(cells) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda c: _cell(t, c[0], c[1], config), cells))
    else:
        results = [_cell(t, i, j, config) for i, j in cells]
    by_pair = {(e.offline, e.online): e for e in results}

    def key(name: str):
        e = by_pair[(name, config.primary_online)]
        return (0 if e.pearson is not None else 1, -(e.abs_pearson or 0.0), name)

    order = sorted(t.offline_names, key=key)
    entries = [by_pair[(o, n)] for o in order for n in t.online_names]
    return CorrelationReport(entries, config.primary_online, order)


# -- scatter exports -----------------------------------------------------------------


def scatter_rows(table: PolicyFamilyTable, offline: str, online: str) -> list[tuple[float, float, str]]:
    t = table.sorted()
    x = t.offline_column(offline)
    y = t.online_column(online)
    return [(float(a), float(b), p) for a, b, p in zip(x, y, t.policies)]


def write_scatter(path: str | Path, rows: Sequence[tuple[float, float, str]]) -> None:
    write_csv(path, ["x", "y", "policy_id"], rows)


def scatter_svg(rows: Sequence[tuple[float, float, str]], x_label: str, y_label: str, title: str = "") -> str:
    """Minimal self-contained SVG scatter plot on a fixed 600x400 canvas."""
    w, h, m = 600, 400, 50
    pts = [(x, y) for x, y, _ in rows if math.isfinite(x) and math.isfinite(y)]
    xs = [p[0] for p in pts] or [0.0]
    ys = [p[1] for p in pts] or [0.0]

    def span(lo, hi):
        return (lo - 0.5, hi + 0.5) if hi == lo else (lo, hi)

    x0, x1 = span(min(xs), max(xs))
    y0, y1 = span(min(ys), max(ys))

    def px(x):
        return m + (x - x0) / (x1 - x0) * (w - 2 * m)

    def py(y):
        return h - m - (y - y0) / (y1 - y0) * (h - 2 * m)

    def f(v):
        return format(v, ".2f")

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>',
        f'<line x1="{m}" y1="{h - m}" x2="{w - m}" y2="{h - m}" stroke="black"/>',
        f'<line x1="{m}" y1="{m}" x2="{m}" y2="{h - m}" stroke="black"/>',
        f'<text x="{w // 2}" y="{h - 12}" text-anchor="middle" font-size="12">{_esc(x_label)}</text>',
        f'<text x="14" y="{h // 2}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {h // 2})">{_esc(y_label)}</text>',
        f'<text x="{m}" y="{m - 10}" font-size="10">{fmt_float(x0)}..{fmt_float(x1)} x {fmt_float(y0)}..{fmt_float(y1)}</text>',
    ]
    if title:
        out.append(f'<text x="{w // 2}" y="20" text-anchor="middle" font-size="14">{_esc(title)}</text>')
    for x, y in pts:
        out.append(f'<circle cx="{f(px(x))}" cy="{f(py(y))}" r="4" fill="steelblue"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
