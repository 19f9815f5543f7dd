"""Empirical per-prompt calibrated rewards.

A :class:`CalibrationTable` stores the sorted rewards of ``K`` reference
rollouts for one prompt.  A query reward is scored as the fraction of
rollouts it beats, with exact ties counted as half a win.
"""

from __future__ import annotations

import bisect
import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameter, InvalidReward, MissingPrompt

DEFAULT_K = 100


@dataclass(frozen=True)
class RewardRecord:
    prompt_id: str
    response_id: str
    reward: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.reward):
            raise InvalidReward(
                f"non-finite reward {self.reward!r} for "
                f"({self.prompt_id!r}, {self.response_id!r})"
            )


@dataclass(frozen=True)
class CalibrationTable:
    prompt_id: str
    sorted_rewards: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.sorted_rewards:
            raise MissingPrompt(f"empty calibration table for {self.prompt_id!r}")
        if any(b < a for a, b in zip(self.sorted_rewards, self.sorted_rewards[1:])):
            raise InvalidParameter("sorted_rewards must be nondecreasing")

    @property
    def K(self) -> int:
        return len(self.sorted_rewards)


def _check_finite(reward: float) -> float:
    reward = float(reward)
    if not math.isfinite(reward):
        raise InvalidReward(f"non-finite reward {reward!r}")
    return reward


def build_table(records: Iterable[RewardRecord], prompt_id: str) -> CalibrationTable:
    """Collect the rewards belonging to ``prompt_id`` into a sorted table."""
    rewards = [_check_finite(r.reward) for r in records if r.prompt_id == prompt_id]
    if not rewards:
        raise MissingPrompt(f"no records for prompt {prompt_id!r}")
    return CalibrationTable(prompt_id, tuple(sorted(rewards)))


def build_tables(records: Iterable[RewardRecord]) -> dict[str, CalibrationTable]:
    """One table per distinct prompt, keeping the per-prompt ``K`` as found."""
    grouped: dict[str, list[float]] = {}
    seen: set[tuple[str, str]] = set()
    for r in records:
        key = (r.prompt_id, r.response_id)
        if key in seen:
            raise InvalidParameter(f"duplicate record {key!r}")
        seen.add(key)
        grouped.setdefault(r.prompt_id, []).append(_check_finite(r.reward))
    return {p: CalibrationTable(p, tuple(sorted(v))) for p, v in grouped.items()}


def empirical_calibrate(table: CalibrationTable, reward: float) -> float:
    """Score ``reward`` against the table: (#less + 0.5 * #equal) / K."""
    reward = _check_finite(reward)
    z = table.sorted_rewards
    lo = bisect.bisect_left(z, reward)
    hi = bisect.bisect_right(z, reward)
    return (lo + 0.5 * (hi - lo)) / len(z)


def calibrate_many(table: CalibrationTable, rewards) -> np.ndarray:
    """Vectorised :func:`empirical_calibrate` for an array of rewards."""
    rewards = np.asarray(rewards, dtype=float)
    if not np.all(np.isfinite(rewards)):
        raise InvalidReward("non-finite reward in query batch")
    z = np.asarray(table.sorted_rewards)
    lo = np.searchsorted(z, rewards, side="left")
    hi = np.searchsorted(z, rewards, side="right")
    return (lo + 0.5 * (hi - lo)) / z.size


def calibrate_against(tables: dict[str, CalibrationTable], prompt_id: str, reward: float) -> float:
    try:
        table = tables[prompt_id]
    except KeyError:
        raise MissingPrompt(f"no calibration table for prompt {prompt_id!r}") from None
    return empirical_calibrate(table, reward)


def dkw_error_bound(K: int, delta: float) -> float:
    """Uniform deviation bound sqrt(log(2/delta) / (2K)) holding w.p. 1 - delta."""
    if int(K) != K or K < 1:
        raise InvalidParameter(f"K must be a positive integer, got {K!r}")
    if not 0.0 < delta < 1.0:
        raise InvalidParameter(f"delta must lie in (0, 1), got {delta!r}")
    return math.sqrt(math.log(2.0 / delta) / (2.0 * K))


def check_monotone_invariance(
    table: CalibrationTable,
    monotone_map: Callable[[float], float],
    probe_rewards: Sequence[float],
) -> bool:
    """True iff scores are unchanged after mapping table and probes through ``monotone_map``.

    The map must be strictly increasing over the table and probes; a map that
    collapses distinct values (e.g. a constant) violates that precondition.
    """
    mapped = CalibrationTable(
        table.prompt_id, tuple(sorted(float(monotone_map(z)) for z in table.sorted_rewards))
    )
    return all(
        empirical_calibrate(table, r) == empirical_calibrate(mapped, float(monotone_map(r)))
        for r in probe_rewards
    )
