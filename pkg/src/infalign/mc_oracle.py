"""Monte Carlo oracle for the analytic win rates and KL values.

Toy models live in calibrated-reward space.  A draw from a tilted model
starts from a base draw, takes its calibrated value ``V`` under the base
(uniform by construction), and maps it through the inverse CDF of the tilted
density.  Procedures act literally on each trial's ``N`` draws, selecting by
the draws' calibrated values under the policy being sampled.

Randomness is counter based: every (seed, role, chunk) triple owns its own
Philox stream, so chunks can run in any order or in parallel and still merge
to bit-identical results.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import analytic
from .errors import InvalidParameter
from .procedures import BestOfN, Custom, Identity, InferenceProcedure, RewindRepeat, WorstOfN
from .transforms import Transform

BASE_DISTRIBUTIONS = ("uniform", "exponential")
DEFAULT_TRIALS = 1_000_000
CHUNK_TRIALS = 1 << 16
THREADS_ENV = "INFALIGN_THREADS"

# stream roles, kept distinct so two models with one seed stay independent
ROLE_A, ROLE_B, ROLE_SAMPLE, ROLE_KL = 0, 1, 2, 3


@dataclass(frozen=True, eq=False)
class ToyModel:
    """Continuous toy policy: a base reward distribution tilted by ``transform``.

    ``transform=None`` is the untilted base model.
    """

    base_distribution: str = "uniform"
    transform: Transform | None = None
    beta: float = 1.0
    seed: int = 0
    M: int = analytic.DEFAULT_GRID
    _policy: object = field(default=None, repr=False)

    def __post_init__(self):
        if self.base_distribution not in BASE_DISTRIBUTIONS:
            raise InvalidParameter(f"base distribution must be one of {BASE_DISTRIBUTIONS}")
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise InvalidParameter(f"beta must be positive and finite, got {self.beta!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidParameter("seed must be a 64-bit unsigned integer")
        if self.transform is not None:
            resolved = self.transform.for_beta(self.beta)
            # M is the starting grid; it is refined until the density is resolved
            object.__setattr__(self, "_policy", analytic.build_resolved(resolved, self.beta, self.M))

    @property
    def policy(self) -> analytic.TiltedPolicy | None:
        return self._policy

    def base_draws(self, rng: np.random.Generator, shape) -> tuple[np.ndarray, np.ndarray]:
        """Raw base rewards and their calibrated values under the base."""
        if self.base_distribution == "uniform":
            raw = rng.random(shape)
            return raw, raw
        raw = rng.standard_exponential(shape)
        return raw, -np.expm1(-raw)

    def to_policy_scale(self, v: np.ndarray) -> np.ndarray:
        """Map base-calibrated values to this model's calibrated reward."""
        if self._policy is None:
            return v
        return self._policy.quantile(v)

    def to_raw(self, u: np.ndarray) -> np.ndarray:
        if self.base_distribution == "uniform":
            return u
        return -np.log1p(-np.minimum(u, 1.0 - 1e-16))


@dataclass(frozen=True)
class MCEstimate:
    value: float
    std_error: float
    samples: int

    def z_score(self, reference: float) -> float:
        se = self.std_error
        if se == 0.0:
            # every trial agreed: no event in n trials bounds its rate by 3/n at 95%
            se = 1.5 / self.samples
        return (self.value - reference) / se


def _rng(seed: int, role: int, chunk: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(role, chunk))
    return np.random.Generator(np.random.Philox(ss))


def _chunks(total: int):
    if int(total) != total or total < 1:
        raise InvalidParameter(f"sample count must be a positive integer, got {total!r}")
    starts = range(0, int(total), CHUNK_TRIALS)
    return [(i, min(CHUNK_TRIALS, int(total) - s)) for i, s in enumerate(starts)]


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise InvalidParameter(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def _map_chunks(fn, chunks, threads: int | None = None):
    threads = thread_count() if threads is None else threads
    if threads <= 1 or len(chunks) == 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, chunks))


def _merge(stats) -> MCEstimate:
    """Pool per-chunk (count, mean, sum of squared deviations)."""
    n, mean, m2 = 0, 0.0, 0.0
    for k, mu, s in stats:
        delta = mu - mean
        total = n + k
        mean += delta * k / total
        m2 += s + delta * delta * n * k / total
        n = total
    var = m2 / (n - 1) if n > 1 else 0.0
    return MCEstimate(float(mean), float(math.sqrt(max(var, 0.0) / n)), int(n))


def _stats(x: np.ndarray):
    mu = float(x.mean())
    return x.size, mu, float(np.sum((x - mu) ** 2))


def sample_aligned(model: ToyModel, n: int, role: int = ROLE_SAMPLE) -> np.ndarray:
    """``n`` i.i.d. calibrated rewards from ``model`` (values in [0, 1])."""

    def run(chunk):
        idx, size = chunk
        _, v = model.base_draws(_rng(model.seed, role, idx), size)
        return model.to_policy_scale(v)

    return np.concatenate(_map_chunks(run, _chunks(n)))


def _select(v: np.ndarray, procedure: InferenceProcedure) -> np.ndarray:
    """Column picked in each row of calibrated values ``v`` (trials, draws)."""
    rows = v.shape[0]
    if isinstance(procedure, Identity):
        return np.zeros(rows, dtype=np.intp)
    if isinstance(procedure, BestOfN):
        return v.argmax(axis=1)
    if isinstance(procedure, WorstOfN):
        return v.argmin(axis=1)
    if isinstance(procedure, RewindRepeat):
        hit = v >= procedure.phi
        first = hit.argmax(axis=1)
        found = hit[np.arange(rows), first]
        fallback = v.shape[1] - 1 if procedure.fallback == "last" else v.argmax(axis=1)
        return np.where(found, first, fallback)
    raise InvalidParameter(f"no literal sampler for {procedure.label}")


def _custom_draws(procedure: Custom, size: int, rng: np.random.Generator) -> np.ndarray:
    """Rejection sampling from the density ``g`` on [0, 1]."""
    bound = float(np.max(procedure.g_values))
    scale = procedure.g_integral()
    out = np.empty(0)
    while out.size < size:
        want = int((size - out.size) * bound / scale * 1.1) + 16
        prop = rng.random(want)
        keep = rng.random(want) * bound < procedure.g(prop)
        out = np.concatenate([out, prop[keep]])
    return out[:size]


def _procedure_outputs(model: ToyModel, procedure: InferenceProcedure, size: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Raw rewards of ``size`` procedure outputs from ``model``."""
    if isinstance(procedure, Custom):
        return model.to_raw(model.to_policy_scale(_custom_draws(procedure, size, rng)))
    raw, v = model.base_draws(rng, (size, procedure.draws))
    # the tilt is monotone, so ranking by v ranks by the policy's calibrated reward
    pick = _select(v, procedure)
    rows = np.arange(size)
    if model.policy is None:
        return raw[rows, pick]
    return model.to_raw(model.to_policy_scale(v[rows, pick]))


def apply_procedure(model: ToyModel, procedure: InferenceProcedure, trials: int,
                    seed: int | None = None) -> np.ndarray:
    """Calibrated rewards (under the base) of ``trials`` procedure outputs."""
    src = model if seed is None else _reseeded(model, seed)

    def run(chunk):
        idx, size = chunk
        raw = _procedure_outputs(src, procedure, size, _rng(src.seed, ROLE_A, idx))
        return raw if src.base_distribution == "uniform" else -np.expm1(-raw)

    return np.concatenate(_map_chunks(run, _chunks(trials)))


def _reseeded(model: ToyModel, seed: int) -> ToyModel:
    clone = object.__new__(ToyModel)
    for name in ("base_distribution", "transform", "beta", "M", "_policy"):
        object.__setattr__(clone, name, getattr(model, name))
    object.__setattr__(clone, "seed", int(seed))
    return clone


def estimate_win_rate(model_a: ToyModel, model_b: ToyModel, procedure: InferenceProcedure,
                      trials: int = DEFAULT_TRIALS) -> MCEstimate:
    """Fraction of trials where ``procedure`` on ``a`` beats it on ``b``; ties score 0.5."""
    if model_a.base_distribution != model_b.base_distribution:
        raise InvalidParameter("both models must share a base reward distribution")

    def run(chunk):
        idx, size = chunk
        ra = _procedure_outputs(model_a, procedure, size, _rng(model_a.seed, ROLE_A, idx))
        rb = _procedure_outputs(model_b, procedure, size, _rng(model_b.seed, ROLE_B, idx))
        score = (ra > rb) + 0.5 * (ra == rb)
        return _stats(score.astype(float))

    return _merge(_map_chunks(run, _chunks(trials)))


def estimate_kl(model: ToyModel, samples: int = DEFAULT_TRIALS) -> MCEstimate:
    """Mean log-density of aligned draws, using the exact tilted density."""

    def run(chunk):
        idx, size = chunk
        if model.policy is None:
            return _stats(np.zeros(size))
        _, v = model.base_draws(_rng(model.seed, ROLE_KL, idx), size)
        u = model.to_policy_scale(v)
        return _stats(model.policy.log_density(u))

    return _merge(_map_chunks(run, _chunks(samples)))


@dataclass(frozen=True)
class OracleRow:
    transform: str
    beta: float
    procedure: str
    analytic: float
    mc: float
    std_err: float
    z_score: float

    FIELDS = ("transform", "beta", "procedure", "analytic", "mc", "std_err", "z_score")

    def as_tuple(self):
        return tuple(getattr(self, f) for f in self.FIELDS)


def oracle_cell(transform: Transform, beta: float, procedure: InferenceProcedure,
                trials: int = DEFAULT_TRIALS, seed: int = 0, base_distribution: str = "uniform",
                M: int = analytic.DEFAULT_GRID) -> OracleRow:
    """Compare the analytic win rate of one (transform, beta, procedure) cell with simulation."""
    aligned = ToyModel(base_distribution, transform, beta, seed, M)
    base = ToyModel(base_distribution, None, 1.0, seed, M)
    exact = analytic.win_rate(aligned.policy, procedure)
    est = estimate_win_rate(aligned, base, procedure, trials)
    return OracleRow(transform.label, float(beta), procedure.label, exact, est.value,
                     est.std_error, est.z_score(exact))
