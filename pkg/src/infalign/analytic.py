"""Exact win rate and KL of tilted policies in calibrated-reward space.

For a continuous base policy the calibrated reward is Unif[0, 1], and the
KL-regularised solution for reward ``Phi(C)`` has density
``f(u) = exp(Phi(u) / beta) / Z`` on [0, 1].  Everything here works with that
one-dimensional density, so no reward model or base policy is needed.

Integrals use composite Gauss-Legendre on the cells of a uniform grid, with
the transform evaluated exactly at the nodes.  This stays accurate for
densities that are sharply peaked or have a singular derivative at 0 (the log
transform), where Simpson on grid values converges slowly.  Log-weights are
max-shifted before exponentiation so no intermediate overflows.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import InvalidParameter, UnsupportedProcedure
from .procedures import BestOfN, Custom, Identity, InferenceProcedure, RewindRepeat, WorstOfN
from .transforms import Transform

DEFAULT_GRID = 2001
GL_ORDER = 8
# log-density change per cell above which quadrature loses accuracy
MAX_LOG_STEP = 20.0

_x, _w = np.polynomial.legendre.leggauss(GL_ORDER)
GL_NODES = 0.5 * (_x + 1.0)
GL_WEIGHTS = 0.5 * _w
del _x, _w


def _check_grid(M: int) -> int:
    if int(M) != M or M < 3 or M % 2 == 0:
        raise InvalidParameter(f"grid size must be an odd integer >= 3, got {M!r}")
    return int(M)


@dataclass(frozen=True, eq=False)
class TiltedPolicy:
    """Density ``exp(Phi/beta)/Z`` on [0, 1] with its CDF tabulated on a grid."""

    transform: Transform
    beta: float
    grid: np.ndarray
    density_values: np.ndarray
    cdf_values: np.ndarray
    moment_values: np.ndarray  # int_0^u s f(s) ds on the grid
    shift: float
    log_norm: float  # log of int exp(Phi/beta - shift)
    nodes: np.ndarray = field(repr=False)
    node_weights: np.ndarray = field(repr=False)
    node_density: np.ndarray = field(repr=False)
    node_cdf: np.ndarray = field(repr=False)

    @property
    def M(self) -> int:
        return self.grid.size

    @property
    def h(self) -> float:
        return 1.0 / (self.M - 1)

    @property
    def log_z(self) -> float:
        """log int_0^1 exp(Phi/beta), unshifted."""
        return self.log_norm + self.shift

    @property
    def max_log_step(self) -> float:
        """Largest change of log-density across one grid cell (resolution check)."""
        logf = np.log(np.maximum(self.density_values, np.finfo(float).tiny))
        return float(np.max(np.abs(np.diff(logf))))

    def log_density(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return self.transform(u) / self.beta - self.shift - self.log_norm

    def density(self, u) -> np.ndarray:
        return np.exp(self.log_density(u))

    def _partial(self, u, weight_by_u: bool):
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        h = self.h
        idx = np.minimum((u / h).astype(int), self.M - 2)
        left = self.grid[idx]
        width = u - left
        pts = left[..., None] + width[..., None] * GL_NODES
        vals = self.density(pts)
        if weight_by_u:
            vals = vals * pts
        base = self.moment_values if weight_by_u else self.cdf_values
        return base[idx] + np.sum(vals * GL_WEIGHTS, axis=-1) * width

    def cdf(self, u):
        """CDF at arbitrary points: grid value plus a Gauss-Legendre partial cell."""
        return np.clip(self._partial(u, False), 0.0, 1.0)

    def partial_moments(self, u):
        """(F(u), int_0^u s f(s) ds) at arbitrary points."""
        return self._partial(u, False), self._partial(u, True)

    def quantile(self, v, refine: bool = False):
        """Inverse CDF.

        Within a cell the density is modelled as log-linear between its end
        points and rescaled to the cell's exact mass; ``refine`` adds Newton
        steps against the exact CDF.
        """
        v = np.clip(np.asarray(v, dtype=float), 0.0, 1.0)
        F = self.cdf_values
        idx = np.clip(np.searchsorted(F, v, side="right") - 1, 0, self.M - 2)
        mass = F[idx + 1] - F[idx]
        frac = np.divide(v - F[idx], mass, out=np.zeros_like(v), where=mass > 0)
        frac = np.clip(frac, 0.0, 1.0)
        f0 = self.density_values[idx]
        f1 = self.density_values[idx + 1]
        h = self.h
        with np.errstate(divide="ignore", invalid="ignore"):
            slope = (np.log(f1) - np.log(f0)) / h
            sh = slope * h
            t_exp = np.log1p(frac * np.expm1(sh)) / slope
        use_lin = ~np.isfinite(t_exp) | (np.abs(sh) < 1e-9)
        t = np.where(use_lin, frac * h, t_exp)
        x = self.grid[idx] + np.clip(t, 0.0, h)
        if refine:
            x = self._refine(x, v, self.grid[idx], self.grid[idx + 1])
        return x

    def _refine(self, x, v, lo, hi, steps: int = 60):
        # Newton inside a shrinking bracket, bisecting when a step leaves it
        lo, hi = lo.copy(), hi.copy()
        for _ in range(steps):
            err = self._partial(x, False) - v
            lo = np.where(err < 0, x, lo)
            hi = np.where(err > 0, x, hi)
            dens = self.density(x)
            step = np.divide(err, dens, out=np.full_like(x, np.inf), where=dens > 0)
            cand = x - step
            bad = ~((cand > lo) & (cand < hi))
            new = np.where(bad, 0.5 * (lo + hi), cand)
            if np.all(np.abs(new - x) <= 1e-15):
                return new
            x = new
        return x

    def integrate_nodes(self, values) -> float:
        """Integrate values sampled at the quadrature nodes."""
        return float(np.sum(values * self.node_weights))


def _node_layout(M: int):
    grid = np.linspace(0.0, 1.0, M)
    h = 1.0 / (M - 1)
    nodes = grid[:-1, None] + h * GL_NODES[None, :]
    weights = np.broadcast_to(h * GL_WEIGHTS, nodes.shape)
    return grid, h, nodes, weights


def _warn_unresolved(steepest: float) -> None:
    warnings.warn(
        f"log-density changes by {steepest:.3g} within one grid cell; "
        f"increase the grid size or beta for accurate results",
        RuntimeWarning,
        stacklevel=3,
    )


def build_tilted(transform: Transform, beta: float, M: int = DEFAULT_GRID) -> TiltedPolicy:
    """Tilt the uniform calibrated base by ``exp(Phi/beta)``."""
    policy, steepest = _tilt(transform, beta, M)
    if steepest > MAX_LOG_STEP:
        _warn_unresolved(steepest)
    return policy


def _tilt(transform: Transform, beta: float, M: int):
    """The tilted policy plus the largest log-density step in a cell carrying mass."""
    if not (beta > 0 and math.isfinite(beta)):
        raise InvalidParameter(f"beta must be positive and finite, got {beta!r}")
    M = _check_grid(M)
    grid, h, nodes, weights = _node_layout(M)

    a_grid = transform(grid) / beta
    a_nodes = transform(nodes) / beta
    if not (np.all(np.isfinite(a_grid)) and np.all(np.isfinite(a_nodes))):
        raise InvalidParameter("transform produced non-finite values")
    # shifting by the node maximum keeps the normaliser positive even when the
    # grid is far too coarse (that case is flagged by the returned step)
    shift = float(a_nodes.max())

    w_nodes = np.exp(a_nodes - shift)
    cell_mass = np.sum(w_nodes * weights, axis=1)
    norm = float(np.sum(cell_mass))
    log_norm = math.log(norm)
    heavy = cell_mass > 1e-10 * norm
    steepest = float(np.max(np.abs(np.diff(a_grid))[heavy], initial=0.0))

    with np.errstate(over="ignore"):
        density_grid = np.exp(a_grid - shift) / norm
    density_nodes = w_nodes / norm
    cdf_grid = np.concatenate([[0.0], np.cumsum(cell_mass)]) / norm
    cdf_grid[-1] = 1.0
    moment_grid = np.concatenate([[0.0], np.cumsum(np.sum(w_nodes * nodes * weights, axis=1))]) / norm

    # CDF at interior nodes: nested rule on [u_i, node]
    sub = grid[:-1, None, None] + (nodes - grid[:-1, None])[..., None] * GL_NODES
    sub_w = np.exp(transform(sub) / beta - shift) / norm
    partial = np.sum(sub_w * GL_WEIGHTS, axis=-1) * (nodes - grid[:-1, None])
    cdf_nodes = np.clip(cdf_grid[:-1, None] + partial, 0.0, 1.0)

    policy = TiltedPolicy(
        transform=transform,
        beta=float(beta),
        grid=grid,
        density_values=density_grid,
        cdf_values=np.maximum.accumulate(np.clip(cdf_grid, 0.0, 1.0)),
        moment_values=moment_grid,
        shift=shift,
        log_norm=log_norm,
        nodes=nodes,
        node_weights=weights,
        node_density=density_nodes,
        node_cdf=cdf_nodes,
    )
    return policy, steepest


def build_resolved(transform: Transform, beta: float, M: int = DEFAULT_GRID,
                   max_M: int = (1 << 17) + 1) -> TiltedPolicy:
    """Like :func:`build_tilted`, doubling the grid until it resolves the density."""
    while True:
        policy, steepest = _tilt(transform, beta, M)
        if steepest <= MAX_LOG_STEP:
            return policy
        if 2 * M - 1 > max_M:
            _warn_unresolved(steepest)
            return policy
        M = 2 * M - 1


def kl_divergence(policy: TiltedPolicy) -> float:
    """KL(tilted || uniform base), in nats.

    Equals ``E_f[Phi]/beta - log int exp(Phi/beta)``; computed as
    ``E_f[log f]`` from the shifted log-weights, clamped at 0.
    """
    logf = policy.transform(policy.nodes) / policy.beta - policy.shift - policy.log_norm
    kl = policy.integrate_nodes(policy.node_density * logf)
    return max(kl, 0.0)


def _rewind_win_rate(policy: TiltedPolicy, proc: RewindRepeat) -> float:
    lo, hi = proc.levels()
    phi = proc.phi
    u_star = float(policy.quantile(phi, refine=True))
    cuts = sorted({0.0, 1.0, min(max(u_star, 0.0), 1.0), phi})
    F, H = policy.partial_moments(np.array(cuts))
    total = 0.0
    for k in range(len(cuts) - 1):
        a, b = cuts[k], cuts[k + 1]
        if b <= a:
            continue
        mid = 0.5 * (a + b)
        level = hi if mid >= u_star else lo
        # base-output CDF G is linear on each piece: G(s) = alpha + gamma s
        if mid < phi:
            alpha, gamma = 0.0, lo
        else:
            alpha, gamma = (lo - hi) * phi, hi
        total += level * (alpha * (F[k + 1] - F[k]) + gamma * (H[k + 1] - H[k]))
    return float(total)


def general_win_rate(policy: TiltedPolicy, procedure: InferenceProcedure) -> float:
    """Inference-time win rate from the generic calibrated-procedure formula.

    ``W = int f g(F) G / (int f g(F) * int g)`` with ``G(u) = int_0^u g``.
    Assumes ``g`` is smooth enough for cell-wise Gauss-Legendre.
    """
    x = policy.nodes
    gF = procedure.g(policy.node_cdf)
    weight = policy.node_density * gF
    num = policy.integrate_nodes(weight * procedure.G(x))
    den = policy.integrate_nodes(weight) * procedure.g_integral()
    return float(num / den)


def win_rate(policy: TiltedPolicy, procedure: InferenceProcedure) -> float:
    """Win rate of the tilted policy over the base, both passed through ``procedure``."""
    x = policy.nodes
    F = policy.node_cdf
    f = policy.node_density
    if isinstance(procedure, Identity):
        wr = policy.integrate_nodes(x * f)
    elif isinstance(procedure, BestOfN):
        n = procedure.n
        wr = 1.0 - n * policy.integrate_nodes(F**n * x ** (n - 1))
    elif isinstance(procedure, WorstOfN):
        n = procedure.n
        wr = n * policy.integrate_nodes((1.0 - F) ** n * (1.0 - x) ** (n - 1))
    elif isinstance(procedure, RewindRepeat):
        if procedure.fallback != "last":
            raise UnsupportedProcedure(
                "analytic win rate for rewind fallback 'best' is not available"
            )
        if procedure.degenerate:
            wr = policy.integrate_nodes(x * f)
        else:
            wr = _rewind_win_rate(policy, procedure)
    elif isinstance(procedure, Custom):
        wr = general_win_rate(policy, procedure)
    else:
        raise UnsupportedProcedure(f"no analytic route for {procedure!r}")
    return float(min(max(wr, 0.0), 1.0))


def infalign_objective(policy: TiltedPolicy, procedure: InferenceProcedure, beta: float) -> float:
    """KL-regularised inference-time win rate ``W - beta * KL``."""
    if not math.isclose(beta, policy.beta, rel_tol=1e-12, abs_tol=0.0):
        raise InvalidParameter(f"beta {beta!r} does not match the policy's beta {policy.beta!r}")
    return win_rate(policy, procedure) - beta * kl_divergence(policy)


@dataclass(frozen=True)
class TradeoffPoint:
    beta: float
    kl: float
    win_rate: float
    procedure: InferenceProcedure
    transform: Transform


def evaluate_point(transform, procedure, beta: float, M: int = DEFAULT_GRID) -> TradeoffPoint:
    resolved = transform.for_beta(beta)
    policy = build_tilted(resolved, beta, M)
    return TradeoffPoint(beta, kl_divergence(policy), win_rate(policy, procedure), procedure, resolved)


def sweep_curve(transform, procedure: InferenceProcedure, betas, M: int = DEFAULT_GRID, executor=None):
    """Alignment curve: one point per beta, sorted by KL ascending.

    ``transform`` may be a fixed :class:`Transform` or a family whose
    ``for_beta`` re-derives the transform for every beta.  An optional
    ``concurrent.futures`` executor spreads betas over workers.
    """
    betas = [float(b) for b in betas]
    if not betas:
        raise InvalidParameter("beta list is empty")
    for b in betas:
        if not (b > 0 and math.isfinite(b)):
            raise InvalidParameter(f"beta must be positive and finite, got {b!r}")
    if executor is None:
        points = [evaluate_point(transform, procedure, b, M) for b in betas]
    else:
        points = list(executor.map(lambda b: evaluate_point(transform, procedure, b, M), betas))
    return sorted(points, key=lambda p: p.kl)


def beta_for_kl(transform, target_kl: float, M: int = DEFAULT_GRID, xtol: float = 1e-10) -> float:
    """Regulariser strength at which the tilted policy has the given KL.

    KL is nonincreasing in beta, so a bracketing root search over log(beta)
    suffices.  The bracket scales with the spread of ``Phi`` on [0, 1].
    """
    if not target_kl > 0:
        raise InvalidParameter("target KL must be positive")
    probe = transform.for_beta(1.0)(np.linspace(0.0, 1.0, 257))
    spread = float(np.ptp(probe)) or 1.0

    def gap(log_beta):
        beta = math.exp(log_beta)
        # probes far from the answer may be unresolved; that is harmless here
        return kl_divergence(_tilt(transform.for_beta(beta), beta, M)[0]) - target_kl

    centre = math.log(spread)
    step = math.log(4.0)
    lo = hi = centre
    g_lo = g_hi = gap(centre)
    # KL falls as beta grows: walk outwards until the target is bracketed
    while g_hi > 0:
        if hi - centre > math.log(1e6):
            raise InvalidParameter(f"KL {target_kl} not reached for any beta up to the search limit")
        lo, g_lo = hi, g_hi
        hi += step
        g_hi = gap(hi)
    while g_lo < 0:
        if centre - lo > math.log(1e6):
            raise InvalidParameter(f"KL {target_kl} not reachable for {transform.label}")
        hi, g_hi = lo, g_lo
        lo -= step
        g_lo = gap(lo)
    if g_lo == 0:
        return math.exp(lo)
    if g_hi == 0:
        return math.exp(hi)
    return math.exp(brentq(gap, lo, hi, xtol=xtol))


def grid_objective(density, procedure: InferenceProcedure, beta: float) -> float:
    """``W - beta * KL`` for a density given only by its values on a uniform grid.

    Independent of :func:`build_tilted`: Simpson and cumulative Simpson on the
    grid values, no transform evaluations.  Used for perturbation checks.
    """
    from scipy.integrate import cumulative_simpson, simpson
    from scipy.special import xlogy

    f = np.asarray(density, dtype=float)
    u = np.linspace(0.0, 1.0, f.size)
    h = u[1] - u[0]
    F = cumulative_simpson(f, dx=h, initial=0.0)
    kl = simpson(xlogy(f, f), dx=h)
    if isinstance(procedure, BestOfN):
        n = procedure.n
        wr = 1.0 - n * simpson(F**n * u ** (n - 1), dx=h)
    elif isinstance(procedure, WorstOfN):
        n = procedure.n
        wr = n * simpson((1.0 - F) ** n * (1.0 - u) ** (n - 1), dx=h)
    else:
        gF = procedure.g(np.clip(F, 0, 1))
        wr = simpson(f * gF * procedure.G(u), dx=h) / (simpson(f * gF, dx=h) * procedure.g_integral())
    return float(wr - beta * kl)
