"""Synthetic policies: the expert corrupted by bias, noise and hazard blindness."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..datamodel import Action
from ..textio import ParseError, iter_lines, write_lines
from .world import VehicleState, World, expert_policy


class PolicySpecError(ValueError):
    pass


@dataclass(frozen=True)
class PolicySpec:
    policy_id: str
    noise_std: float = 0.0
    hazard_noise_mult: float = 1.0
    bias: float = 0.0
    miss_prob: float = 0.0
    calibrated: bool = True
    K: int = 8
    seed: int = 0

    def __post_init__(self):
        for name in ("noise_std", "hazard_noise_mult", "bias", "miss_prob"):
            if not math.isfinite(getattr(self, name)):
                raise PolicySpecError(f"policy {self.policy_id!r}: {name} must be finite")
        if self.noise_std < 0:
            raise PolicySpecError(f"policy {self.policy_id!r}: noise_std must be >= 0")
        if self.hazard_noise_mult < 1:
            raise PolicySpecError(f"policy {self.policy_id!r}: hazard_noise_mult must be >= 1")
        if not 0 <= self.miss_prob <= 1:
            raise PolicySpecError(f"policy {self.policy_id!r}: miss_prob must lie in [0, 1]")
        if self.K < 1:
            raise PolicySpecError(f"policy {self.policy_id!r}: K must be >= 1")

    def to_obj(self) -> dict:
        return {
            "policy_id": self.policy_id,
            "noise_std": self.noise_std,
            "hazard_noise_mult": self.hazard_noise_mult,
            "bias": self.bias,
            "miss_prob": self.miss_prob,
            "calibrated": self.calibrated,
            "K": self.K,
            "seed": self.seed,
        }


def load_policies(path: str | Path) -> list[PolicySpec]:
    out = []
    for line_no, obj in iter_lines(path):
        try:
            out.append(PolicySpec(**obj))
        except TypeError as exc:
            raise ParseError(path, line_no, f"bad policy fields: {exc}") from None
        except PolicySpecError as exc:
            raise ParseError(path, line_no, str(exc)) from None
    ids = [p.policy_id for p in out]
    if len(set(ids)) != len(ids):
        raise PolicySpecError(f"{path}: duplicate policy ids")
    return out


def save_policies(specs: Sequence[PolicySpec], path: str | Path) -> None:
    write_lines(path, [s.to_obj() for s in specs])


def bundled_policies_path() -> Path:
    return Path(__file__).parent / "data" / "policies.jsonl"


def bundled_policies() -> list[PolicySpec]:
    return load_policies(bundled_policies_path())


# -- random streams --------------------------------------------------------------------


def _word(s: str) -> int:
    return int.from_bytes(hashlib.sha256(s.encode("utf-8")).digest()[:4], "little")


def stream(master_seed: int, *names: object) -> np.random.Generator:
    """Independent generator keyed by the master seed and a tuple of names.

    Keys never depend on scheduling, so parallel and serial runs draw the
    same numbers.
    """
    words = [int(master_seed) & 0xFFFFFFFF, (int(master_seed) >> 32) & 0xFFFFFFFF]
    words += [n & 0xFFFFFFFF if isinstance(n, int) else _word(str(n)) for n in names]
    return np.random.default_rng(np.random.SeedSequence(words))


def draw_misses(spec: PolicySpec, n_hazards: int, rng: np.random.Generator) -> tuple[bool, ...]:
    """One blindness decision per hazard encounter."""
    u = rng.random(n_hazards)
    return tuple(bool(x < spec.miss_prob) for x in u)


# -- per-step corruption ----------------------------------------------------------------


def noise_scale(spec: PolicySpec, in_zone: bool) -> float:
    if in_zone and spec.calibrated:
        return spec.noise_std * spec.hazard_noise_mult
    return spec.noise_std


def sample_controls(
    spec: PolicySpec,
    base: Action,
    in_zone: bool,
    rng: np.random.Generator,
) -> tuple[list[tuple[float, float]], tuple[float, float]]:
    """K (steer, longitudinal) samples around ``base`` and their mean.

    Every sample is clamped to the legal ranges before averaging.
    """
    std = noise_scale(spec, in_zone)
    noise = rng.standard_normal((spec.K, 2)).tolist()
    steer0 = base.steer + spec.bias
    long0 = base.throttle - base.brake
    out = []
    for n_s, n_l in noise:
        s = min(1.0, max(-1.0, steer0 + std * n_s))
        lg = min(1.0, max(-1.0, long0 + std * n_l))
        out.append((s, lg))
    k = len(out)
    return out, (math.fsum(p[0] for p in out) / k, math.fsum(p[1] for p in out) / k)


def to_action(steer: float, longitudinal: float) -> Action:
    return Action(steer, max(0.0, longitudinal), max(0.0, -longitudinal))


def executed_action(samples: Sequence[tuple[float, float]]) -> Action:
    """Mean of the clamped samples after splitting longitudinal into throttle and brake."""
    k = len(samples)
    return Action(
        math.fsum(p[0] for p in samples) / k,
        math.fsum(max(0.0, p[1]) for p in samples) / k,
        math.fsum(max(0.0, -p[1]) for p in samples) / k,
    )


def policy_samples(
    spec: PolicySpec,
    state: VehicleState,
    world: World,
    t: float,
    s_ego: float,
    rng: np.random.Generator,
    mask: Sequence[bool] = (),
) -> list[tuple[float, float]]:
    base = expert_policy(state, world, t, s_ego, mask)
    return sample_controls(spec, base, world.any_in_zone(s_ego, t), rng)[0]


def corrupted_policy_step(
    spec: PolicySpec,
    state: VehicleState,
    world: World,
    t: float,
    s_ego: float,
    rng: np.random.Generator,
    mask: Sequence[bool] = (),
) -> tuple[list[Action], Action]:
    """K sample actions and the executed (mean) action of ``spec`` at this state.

    ``mask`` holds the per-encounter blindness decisions from :func:`draw_misses`.
    """
    samples = policy_samples(spec, state, world, t, s_ego, rng, mask)
    return [to_action(s, lg) for s, lg in samples], executed_action(samples)
