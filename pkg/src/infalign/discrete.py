"""Exact checks on finite outcome sets.

Everything here is enumeration: calibrated rewards, KL-regularised optima,
win rates, and the log-linear comparison between reward optimisation
regularised towards an SFT model and joint SFT plus reward training.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidParameter, VerificationError

MAX_OUTCOMES = 12
IDENTITY_TOL = 1e-12


def _check_beta(beta) -> float:
    beta = float(beta)
    if not (beta > 0 and math.isfinite(beta)):
        raise InvalidParameter(f"beta must be positive and finite, got {beta!r}")
    return beta


@dataclass(frozen=True, eq=False)
class DiscreteInstance:
    outcomes: tuple
    base_probs: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        p = np.array(self.base_probs, dtype=float)
        r = np.array(self.rewards, dtype=float)
        n = p.size
        if not 2 <= n <= MAX_OUTCOMES:
            raise InvalidParameter(f"need between 2 and {MAX_OUTCOMES} outcomes, got {n}")
        if r.shape != p.shape or len(self.outcomes) != n:
            raise InvalidParameter("outcomes, base_probs and rewards must have equal length")
        if np.any(~np.isfinite(p)) or np.any(p <= 0):
            raise InvalidParameter("base probabilities must be strictly positive")
        if abs(p.sum() - 1.0) > 1e-9:
            raise InvalidParameter(f"base probabilities sum to {p.sum()!r}, not 1")
        if np.any(~np.isfinite(r)):
            raise InvalidParameter("rewards must be finite")
        p = p / p.sum()
        for arr in (p, r):
            arr.setflags(write=False)
        object.__setattr__(self, "outcomes", tuple(str(o) for o in self.outcomes))
        object.__setattr__(self, "base_probs", p)
        object.__setattr__(self, "rewards", r)

    @property
    def n(self) -> int:
        return self.base_probs.size


def random_instance(rng: np.random.Generator, n: int, ties: bool = False) -> DiscreteInstance:
    """Dirichlet base policy and Gaussian rewards; ``ties`` rounds rewards to force repeats."""
    p = rng.dirichlet(np.ones(n))
    p = np.maximum(p, 1e-6)
    p /= p.sum()
    r = rng.normal(size=n)
    if ties:
        r = np.round(r)
    return DiscreteInstance(tuple(f"y{i}" for i in range(n)), p, r)


def read_instance_csv(path: str | Path) -> DiscreteInstance:
    """Read ``outcome,base_prob,reward`` rows."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"outcome", "base_prob", "reward"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise InvalidParameter(f"{path}: expected columns outcome,base_prob,reward")
        rows = list(reader)
    try:
        probs = [float(r["base_prob"]) for r in rows]
        rewards = [float(r["reward"]) for r in rows]
    except ValueError as exc:
        raise InvalidParameter(f"{path}: {exc}") from None
    return DiscreteInstance(tuple(r["outcome"] for r in rows), np.array(probs), np.array(rewards))


def write_instance_csv(instance: DiscreteInstance, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["outcome", "base_prob", "reward"])
        for o, p, r in zip(instance.outcomes, instance.base_probs, instance.rewards):
            w.writerow([o, repr(float(p)), repr(float(r))])


def _pairwise(rewards: np.ndarray) -> np.ndarray:
    """``w[y, z] = 1{r_y > r_z} + 0.5 * 1{r_y == r_z}``."""
    r = np.asarray(rewards, dtype=float)
    return (r[:, None] > r[None, :]) + 0.5 * (r[:, None] == r[None, :])


def calibrated_reward(q, rewards) -> np.ndarray:
    """Calibrated reward of every outcome against reference distribution ``q``."""
    return _pairwise(rewards) @ np.asarray(q, dtype=float)


def exact_calibrated_reward(instance: DiscreteInstance) -> np.ndarray:
    """Calibrated reward under the base policy; ties, including self-ties, count half."""
    return calibrated_reward(instance.base_probs, instance.rewards)


def exact_rlhf(instance: DiscreteInstance, reward_override, beta: float) -> np.ndarray:
    """Maximiser of ``E_pi[R] - beta * KL(pi || base)``: ``base * exp(R / beta)`` normalised."""
    beta = _check_beta(beta)
    R = np.asarray(reward_override, dtype=float)
    if R.shape != instance.base_probs.shape:
        raise InvalidParameter("reward vector length does not match the instance")
    if np.ptp(R) == 0.0:
        # a constant reward leaves the base untouched; return it exactly
        return instance.base_probs.copy()
    logits = np.log(instance.base_probs) + R / beta
    return np.exp(logits - logsumexp(logits))


def exact_win_rate(p, q, rewards, check: bool = True) -> float:
    """Probability that a draw from ``p`` beats a draw from ``q``, ties counting half.

    With ``check`` the double sum is compared against ``E_p[C_q]``.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    # 1/2 plus half the antisymmetric part, summed pairwise so p == q gives 1/2 exactly
    r = np.asarray(rewards, dtype=float)
    sign = np.sign(r[:, None] - r[None, :])
    joint = np.outer(p, q)
    upper = np.triu(sign * (joint - joint.T), 1)
    direct = float(0.5 + 0.5 * upper.sum() / (p.sum() * q.sum()))
    if check:
        via_c = float(np.dot(p, calibrated_reward(q, rewards)))
        if abs(direct - via_c) > IDENTITY_TOL:
            raise VerificationError(f"win-rate identity off by {abs(direct - via_c):.3g}")
    return direct


def kl(p, q) -> np.ndarray:
    """KL(p || q) along the last axis; zero entries of ``p`` contribute nothing."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=-1)


def identity_objective(instance: DiscreteInstance, policy, beta: float) -> np.ndarray:
    """Win rate over the base minus ``beta`` times KL, for one policy or a batch."""
    C = exact_calibrated_reward(instance)
    policy = np.asarray(policy, dtype=float)
    return policy @ C - beta * kl(policy, instance.base_probs)


def _perturbations(pi: np.ndarray, eps: float) -> np.ndarray:
    n = pi.size
    out = []
    for i in range(n):
        for sign in (1.0, -1.0):
            v = pi.copy()
            v[i] = max(v[i] + sign * eps, 0.0)
            out.append(v / v.sum())
    # mass moved between two coordinates
    for i in range(n):
        for j in range(n):
            if i != j and pi[j] > eps:
                v = pi.copy()
                v[i] += eps
                v[j] -= eps
                out.append(v)
    return np.array(out)


def verify_no_procedure_optimality(instance: DiscreteInstance, beta: float, trials: int = 10_000,
                                   seed: int = 0, eps: float = 1e-6, slack: float = 1e-9) -> bool:
    """True when the calibrated-reward optimum beats random and perturbed policies.

    Competitors are ``trials`` Dirichlet(1) policies plus single-coordinate
    and pairwise ``eps`` perturbations of the optimum.
    """
    beta = _check_beta(beta)
    pi_star = exact_rlhf(instance, exact_calibrated_reward(instance), beta)
    best = float(identity_objective(instance, pi_star, beta))
    rng = np.random.default_rng(seed)
    rivals = np.vstack([rng.dirichlet(np.ones(instance.n), size=int(trials)),
                        _perturbations(pi_star, eps)])
    return bool(np.all(identity_objective(instance, rivals, beta) <= best + slack))


@dataclass(frozen=True)
class Counterexample:
    instance: DiscreteInstance
    beta: float
    calibrated_objective: float
    raw_objective: float

    @property
    def margin(self) -> float:
        return self.calibrated_objective - self.raw_objective


def find_raw_reward_counterexample(seed: int = 0, attempts: int = 200, scale: float = 100.0,
                                   beta: float = 0.1, n: int = 4) -> Counterexample | None:
    """Search for an instance where tilting by raw rewards loses to the calibrated optimum."""
    rng = np.random.default_rng(seed)
    for _ in range(attempts):
        inst = random_instance(rng, n)
        good = exact_rlhf(inst, exact_calibrated_reward(inst), beta)
        bad = exact_rlhf(inst, scale * inst.rewards, beta)
        a = float(identity_objective(inst, good, beta))
        b = float(identity_objective(inst, bad, beta))
        if a > b + 1e-9:
            return Counterexample(inst, beta, a, b)
    return None


@dataclass(frozen=True)
class CoupledSolution:
    policy: np.ndarray
    iterations: int
    residual: float


def coupled_em_identity(instance: DiscreteInstance, beta: float, tol: float = 1e-12,
                        max_iter: int = 100) -> CoupledSolution:
    """Alternate reward and policy updates of the coupled equations for the identity procedure.

    With no inference-time procedure the reward update does not depend on
    the policy, so one policy update already lands on the fixed point; the
    loop still runs until an update moves the policy by at most ``tol``.
    ``iterations`` counts the updates that changed the policy.
    """
    beta = _check_beta(beta)
    pi = instance.base_probs.copy()
    residual = math.inf
    for it in range(int(max_iter) + 1):
        # reward for outcome y is the calibrated reward of y against the base
        R = calibrated_reward(instance.base_probs, instance.rewards)
        new = exact_rlhf(instance, R, beta)
        residual = float(np.max(np.abs(new - pi)))
        if residual <= tol and it > 0:
            return CoupledSolution(pi, it, residual)
        pi = new
    return CoupledSolution(pi, int(max_iter), residual)


# log-linear models


@dataclass(frozen=True, eq=False)
class LogLinearInstance:
    """``pi_theta(y) proportional to exp(theta . features[y])`` for one context."""

    features: np.ndarray
    sft_distribution: np.ndarray
    rewards: np.ndarray
    beta: float

    def __post_init__(self):
        G = np.array(self.features, dtype=float)
        p = np.array(self.sft_distribution, dtype=float)
        r = np.array(self.rewards, dtype=float)
        if G.ndim != 2 or G.shape[1] > G.shape[0]:
            raise InvalidParameter("features must be an (outcomes x d) matrix with d <= outcomes")
        if p.shape != (G.shape[0],) or r.shape != p.shape:
            raise InvalidParameter("sft distribution and rewards must have one entry per outcome")
        if not (np.all(np.isfinite(G)) and np.all(np.isfinite(r))):
            raise InvalidParameter("features and rewards must be finite")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise InvalidParameter("sft distribution must be a probability vector")
        _check_beta(self.beta)
        for name, arr in (("features", G), ("sft_distribution", p / p.sum()), ("rewards", r)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def log_policy(self, theta) -> np.ndarray:
        z = self.features @ theta
        return z - logsumexp(z)

    def policy(self, theta) -> np.ndarray:
        return np.exp(self.log_policy(theta))

    def log_partition(self, theta) -> float:
        return float(logsumexp(self.features @ theta))

    def sft_loss(self, theta) -> float:
        return self.log_partition(theta) - float(theta @ (self.features.T @ self.sft_distribution))

    def sft_grad(self, theta) -> np.ndarray:
        return self.features.T @ (self.policy(theta) - self.sft_distribution)

    def ro_loss(self, theta) -> float:
        return -float(self.policy(theta) @ self.rewards)

    def ro_grad(self, theta) -> np.ndarray:
        pi = self.policy(theta)
        return -self.features.T @ (pi * (self.rewards - pi @ self.rewards))

    def sft_hess(self, theta) -> np.ndarray:
        pi = self.policy(theta)
        G = self.features
        return G.T @ ((np.diag(pi) - np.outer(pi, pi)) @ G)

    def ro_hess(self, theta) -> np.ndarray:
        pi = self.policy(theta)
        a = pi * (self.rewards - pi @ self.rewards)
        G = self.features
        return -G.T @ ((np.diag(a) - np.outer(a, pi) - np.outer(pi, a)) @ G)

    def multitask_loss(self, theta) -> float:
        return self.sft_loss(theta) + self.ro_loss(theta) / self.beta

    def multitask_grad(self, theta) -> np.ndarray:
        return self.sft_grad(theta) + self.ro_grad(theta) / self.beta

    def multitask_hess(self, theta) -> np.ndarray:
        return self.sft_hess(theta) + self.ro_hess(theta) / self.beta

    def bilevel_loss(self, theta, theta_sft) -> float:
        """Divergence from the fitted SFT model plus the scaled reward loss.

        The divergence is the Bregman divergence of the log-partition
        function, i.e. KL(pi_sft || pi_theta), evaluated from the two
        distributions directly.
        """
        return float(kl(self.policy(theta_sft), self.policy(theta))) + self.ro_loss(theta) / self.beta

    def bilevel_grad(self, theta, theta_sft) -> np.ndarray:
        return self.features.T @ (self.policy(theta) - self.policy(theta_sft)) + self.ro_grad(theta) / self.beta


def random_loglinear(rng: np.random.Generator, n: int, d: int | None = None,
                     beta: float = 1.0) -> LogLinearInstance:
    """Random instance; ``d = n`` (the default) gives saturated features."""
    d = n if d is None else d
    G = rng.normal(size=(n, d))
    p = rng.dirichlet(np.ones(n))
    p = np.maximum(p, 1e-3)
    return LogLinearInstance(G, p / p.sum(), rng.normal(size=n), beta)


@dataclass(frozen=True)
class DescentResult:
    theta: np.ndarray
    grad_norm: float
    iterations: int
    converged: bool


def gradient_descent(loss, grad, theta0, step: float = 0.1, tol: float = 1e-10,
                     max_iter: int = 200_000) -> DescentResult:
    """Full-batch descent with a fixed trial step and backtracking halving."""
    theta = np.array(theta0, dtype=float)
    value = loss(theta)
    g = grad(theta)
    norm = float(np.linalg.norm(g))
    it = 0
    while norm > tol and it < max_iter:
        it += 1
        s = step
        while True:
            cand = theta - s * g
            cand_value = loss(cand)
            if cand_value <= value - 0.5 * s * norm * norm or s < 1e-12:
                break
            s *= 0.5
        theta, value = cand, cand_value
        g = grad(theta)
        norm = float(np.linalg.norm(g))
    return DescentResult(theta, norm, it, norm <= tol)




def newton_descent(loss, grad, hess, theta0, tol: float = 1e-10, max_iter: int = 500) -> DescentResult:
    """Damped Newton with backtracking.

    Negative curvature is shifted away and directions with (near) zero
    curvature are dropped, so redundant parametrisations such as saturated
    softmax features are handled.  Falls back to the gradient direction
    when the Newton step is not a descent direction.
    """
    theta = np.array(theta0, dtype=float)
    value = loss(theta)
    g = grad(theta)
    norm = float(np.linalg.norm(g))
    it = 0
    while norm > tol and it < max_iter:
        it += 1
        w, V = np.linalg.eigh(hess(theta))
        shift = max(0.0, -float(w.min()))
        w = w + (2.0 * shift if shift > 0 else 0.0)
        cutoff = 1e-12 * max(1.0, float(np.abs(w).max()))
        inv = np.where(w > cutoff, 1.0 / np.where(w > cutoff, w, 1.0), 0.0)
        direction = -V @ (inv * (V.T @ g))
        slope = float(direction @ g)
        if not slope < 0:
            direction, slope = -g, -norm * norm
        s = 1.0
        if -slope <= 1e-13 * (1.0 + abs(value)):
            # predicted decrease is below what the loss can resolve: take the full step
            theta = theta + direction
            value = loss(theta)
            g = grad(theta)
            norm = float(np.linalg.norm(g))
            continue
        while True:
            cand = theta + s * direction
            cand_value = loss(cand)
            if cand_value <= value + 1e-4 * s * slope or s < 1e-12:
                break
            s *= 0.5
        if s < 1e-12:
            # no progress along the Newton direction; accept a plain gradient step
            direction, slope = -g, -norm * norm
            s = 1.0
            while s >= 1e-16:
                cand = theta + s * direction
                cand_value = loss(cand)
                if cand_value <= value + 1e-4 * s * slope:
                    break
                s *= 0.5
            else:
                break
        theta, value = cand, cand_value
        g = grad(theta)
        norm = float(np.linalg.norm(g))
    return DescentResult(theta, norm, it, norm <= tol)


@dataclass(frozen=True)
class MultitaskReport:
    tv_distance: float
    sft: DescentResult
    bilevel: DescentResult
    multitask: DescentResult

    @property
    def converged(self) -> bool:
        return self.sft.converged and self.bilevel.converged and self.multitask.converged

    @property
    def grad_norm(self) -> float:
        return max(self.sft.grad_norm, self.bilevel.grad_norm, self.multitask.grad_norm)


def verify_multitask_equivalence(instance: LogLinearInstance, method: str = "newton",
                                 tol: float = 1e-10, step: float = 0.1,
                                 max_iter: int | None = None, sft_tol: float = 1e-13) -> MultitaskReport:
    """Fit SFT, then minimise both objectives from zero; report their TV distance.

    ``method`` is ``newton`` (default) or ``gd`` for fixed-step descent with
    backtracking; the latter needs very many iterations on ill-conditioned
    features.  The SFT fit uses the tighter ``sft_tol`` because its residual
    gradient feeds directly into the gap between the two objectives.
    """
    zero = np.zeros(instance.d)
    if method == "newton":
        def run(loss, grad, hess, eps=tol):
            return newton_descent(loss, grad, hess, zero, eps, max_iter or 500)
    elif method == "gd":
        def run(loss, grad, hess, eps=tol):
            return gradient_descent(loss, grad, zero, step, eps, max_iter or 200_000)
    else:
        raise InvalidParameter(f"unknown optimiser {method!r}")
    sft = run(instance.sft_loss, instance.sft_grad, instance.sft_hess, min(tol, sft_tol))
    theta_sft = sft.theta
    bilevel = run(lambda t: instance.bilevel_loss(t, theta_sft),
                  lambda t: instance.bilevel_grad(t, theta_sft),
                  instance.multitask_hess)
    multi = run(instance.multitask_loss, instance.multitask_grad, instance.multitask_hess)
    tv = 0.5 * float(np.abs(instance.policy(bilevel.theta) - instance.policy(multi.theta)).sum())
    return MultitaskReport(tv, sft, bilevel, multi)


def objective_gap_spread(instance: LogLinearInstance, theta_sft, thetas) -> float:
    """Range of ``bilevel - multitask`` over the given parameter vectors."""
    gaps = [instance.bilevel_loss(t, theta_sft) - instance.multitask_loss(t) for t in thetas]
    return float(np.ptp(gaps))
