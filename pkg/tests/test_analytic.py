import math
import warnings
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from infalign import analytic
from infalign.analytic import (
    beta_for_kl,
    build_resolved,
    build_tilted,
    general_win_rate,
    infalign_objective,
    kl_divergence,
    sweep_curve,
    win_rate,
)
from infalign.errors import InvalidParameter
from infalign.procedures import BestOfN, Custom, Identity, RewindRepeat, WorstOfN
from infalign.transforms import Constant, ExpTilt, Identity as IdentityT, Log, Tabulated, tabulate

E = math.e
PROCS = [Identity(), BestOfN(2), BestOfN(4), BestOfN(32), WorstOfN(2), WorstOfN(4), WorstOfN(32),
         RewindRepeat(0.85, 32)]
TRANSFORMS = [IdentityT(), Log(), ExpTilt(5), ExpTilt(10), ExpTilt(-5), ExpTilt(-10)]


KL_TARGETS = (0.02, 0.1, 0.5, 1.0, 2.0)


def matched(t, kl):
    return beta_for_kl(t, kl)


def _ref_policy(phi, beta):
    """Density and CDF by adaptive quadrature, independent of the grid code."""
    top = max(phi(0.0), phi(1.0)) / beta
    z, _ = quad(lambda u: math.exp(phi(u) / beta - top), 0, 1, epsabs=1e-14, epsrel=1e-13, limit=200)
    f = lambda u: math.exp(phi(u) / beta - top) / z
    F = lambda u: quad(f, 0, u, epsabs=1e-14, epsrel=1e-13, limit=200)[0]
    return f, F


def test_constant_is_uniform():
    p = build_tilted(Constant(3.0), 0.7)
    assert np.allclose(p.density_values, 1.0, atol=1e-12)
    assert np.allclose(p.cdf_values, p.grid, atol=1e-12)
    assert kl_divergence(p) == 0.0


def test_identity_beta_one_cdf():
    p = build_tilted(IdentityT(), 1.0)
    u = np.linspace(0, 1, 37)
    assert np.allclose(p.cdf(u), (np.exp(u) - 1) / (E - 1), atol=1e-12)


def test_density_and_cdf_invariants():
    for t in TRANSFORMS:
        for beta in [matched(t, k) for k in KL_TARGETS]:
            p = build_tilted(t, beta)
            assert np.all(p.density_values >= 0)
            assert np.all(np.diff(p.cdf_values) >= 0)
            assert p.cdf_values[0] == pytest.approx(0, abs=1e-8)
            assert p.cdf_values[-1] == pytest.approx(1, abs=1e-8)
            assert p.integrate_nodes(p.node_density) == pytest.approx(1, abs=1e-8)


def test_large_beta_is_uniform():
    p = build_tilted(ExpTilt(10), 1e8)
    assert np.allclose(p.density_values, 1.0, atol=1e-3)


def test_kl_closed_form():
    assert kl_divergence(build_tilted(IdentityT(), 1.0)) == pytest.approx(1 / (E - 1) - math.log(E - 1), abs=1e-12)
    # high-precision value of the closed form
    assert 1 / (E - 1) - math.log(E - 1) == pytest.approx(0.0406518522564083, abs=1e-15)


def test_kl_monotone_in_beta():
    for t in TRANSFORMS:
        b0 = matched(t, 1.0)
        kls = [kl_divergence(build_tilted(t, b)) for b in b0 * np.geomspace(0.5, 50, 12)]
        assert all(a >= b for a, b in zip(kls, kls[1:]))
    k = [kl_divergence(build_tilted(IdentityT(), b)) for b in (0.01, 0.1, 1.0)]
    assert k[0] > k[1] > k[2]


@pytest.mark.parametrize("t", TRANSFORMS)
@pytest.mark.parametrize("c", [-3.0, 17.5])
def test_shift_invariance(t, c):
    beta = matched(t, 0.5)
    b = build_tilted(Tabulated(t(np.linspace(0, 1, 2001)) + c), beta)
    ref = build_tilted(Tabulated(t(np.linspace(0, 1, 2001))), beta)
    assert np.allclose(b.density_values, ref.density_values, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("proc", PROCS)
def test_constant_phi_gives_half(proc):
    for beta in (0.01, 1.0, 100.0):
        assert win_rate(build_tilted(Constant(), beta), proc) == pytest.approx(0.5, abs=1e-8)


def test_identity_procedure_closed_form():
    p = build_tilted(IdentityT(), 1.0)
    assert win_rate(p, Identity()) == pytest.approx(1 / (E - 1), abs=1e-12)
    assert infalign_objective(p, Identity(), 1.0) == pytest.approx(math.log(E - 1), abs=1e-12)
    assert math.log(E - 1) == pytest.approx(0.541325, abs=1e-6)


def _ref_bon(f, F, n):
    return 1 - n * quad(lambda u: F(u) ** n * u ** (n - 1), 0, 1, epsabs=1e-13, limit=200)[0]


def _ref_won(f, F, n):
    return n * quad(lambda u: (1 - F(u)) ** n * (1 - u) ** (n - 1), 0, 1, epsabs=1e-13, limit=200)[0]


@pytest.mark.parametrize("t, beta", [(IdentityT(), 1.0), (ExpTilt(5), 0.3), (Log(), 0.7), (ExpTilt(-10), 2.0)])
def test_bon_won_against_adaptive_quadrature(t, beta):
    f, F = _ref_policy(lambda u: float(t(u)), beta)
    p = build_tilted(t, beta)
    for n in (2, 4):
        assert win_rate(p, BestOfN(n)) == pytest.approx(_ref_bon(f, F, n), abs=1e-8)
        assert win_rate(p, WorstOfN(n)) == pytest.approx(_ref_won(f, F, n), abs=1e-8)


def _ref_rewind(f, F, proc):
    # output density of the tilted model is f * g(F); the base output CDF is G
    lo, hi = proc.levels()
    from scipy.optimize import brentq
    u_star = brentq(lambda u: F(u) - proc.phi, 0, 1, xtol=1e-15)
    pts = sorted({u_star, proc.phi})
    integrand = lambda u: f(u) * (hi if F(u) >= proc.phi else lo) * float(proc.G(u))
    return quad(integrand, 0, 1, points=pts, epsabs=1e-13, limit=400)[0]


@pytest.mark.parametrize("t, beta", [(IdentityT(), 1.0), (ExpTilt(10), 7000.0), (Log(), 0.2), (ExpTilt(-5), 0.1)])
@pytest.mark.parametrize("proc", [RewindRepeat(0.85, 32), RewindRepeat(0.5, 2), RewindRepeat(0.3, 5)])
def test_rewind_against_adaptive_quadrature(t, beta, proc):
    f, F = _ref_policy(lambda u: float(t(u)), beta)
    assert win_rate(build_tilted(t, beta), proc) == pytest.approx(_ref_rewind(f, F, proc), abs=1e-7)


@pytest.mark.parametrize("proc", [BestOfN(2), BestOfN(4), WorstOfN(3)])
def test_general_formula_agrees_with_closed_forms(proc):
    for t in (IdentityT(), ExpTilt(5), Log()):
        p = build_tilted(t, 0.4)
        assert general_win_rate(p, proc) == pytest.approx(win_rate(p, proc), abs=1e-9)


def test_custom_procedure_matches_bon():
    grid = np.linspace(0, 1, 4001)
    custom = Custom(grid**2)  # BoN-3 tabulated; quadratic, so interpolation error is small
    p = build_tilted(ExpTilt(5), 0.5)
    assert win_rate(p, custom) == pytest.approx(win_rate(p, BestOfN(3)), abs=1e-6)


@pytest.mark.parametrize("proc", PROCS)
def test_symmetry_identical_policies(proc):
    # Identity transform at huge beta is the base policy, so W = 1/2
    assert win_rate(build_tilted(ExpTilt(3), 1e9), proc) == pytest.approx(0.5, abs=1e-8)


@pytest.mark.parametrize("n", [2, 4, 32])
def test_bon_won_duality(n):
    for t in TRANSFORMS:
        beta = matched(t, 0.5)
        refl = Tabulated(t(1 - np.linspace(0, 1, 2001)))
        w_bon = win_rate(build_tilted(t, beta), BestOfN(n))
        w_won = win_rate(build_tilted(refl, beta), WorstOfN(n))
        assert w_bon == pytest.approx(1 - w_won, abs=1e-6)


@pytest.mark.parametrize("t", TRANSFORMS)
def test_quadrature_converged_at_default_grid(t):
    for kl in KL_TARGETS:
        beta = matched(t, kl)
        a, b = build_tilted(t, beta, 2001), build_tilted(t, beta, 4001)
        assert abs(kl_divergence(a) - kl_divergence(b)) < 1e-6
        for proc in PROCS:
            assert abs(win_rate(a, proc) - win_rate(b, proc)) < 1e-6


def test_sweep_curve_anchor_and_order():
    # exp:10 spans e^10 in value, so even beta = 1e6 leaves a visible tilt (W ~ 0.502)
    for t in (IdentityT(), Log(), ExpTilt(5), ExpTilt(-10)):
        [pt] = sweep_curve(t, BestOfN(4), [1e6])
        assert pt.kl == pytest.approx(0, abs=1e-3)
        assert pt.win_rate == pytest.approx(0.5, abs=1e-3)
    t = ExpTilt(10)
    [pt] = sweep_curve(t, BestOfN(4), [1e6])
    f, F = _ref_policy(lambda u: float(t(u)), 1e6)
    assert pt.win_rate == pytest.approx(_ref_bon(f, F, 4), abs=1e-8)
    assert pt.win_rate > 0.502
    for t in TRANSFORMS:
        betas = [matched(t, k) for k in KL_TARGETS]
        pts = sweep_curve(t, Identity(), betas)
        kls = [p.kl for p in pts]
        assert kls == sorted(kls)
        wins = [p.win_rate for p in pts]
        assert all(b >= a - 1e-12 for a, b in zip(wins, wins[1:]))


def test_sweep_with_executor_matches_serial():
    betas = [0.1, 0.3, 1.0]
    with ThreadPoolExecutor(3) as ex:
        par = sweep_curve(Log(), BestOfN(4), betas, executor=ex)
    ser = sweep_curve(Log(), BestOfN(4), betas)
    assert [(p.kl, p.win_rate) for p in par] == [(p.kl, p.win_rate) for p in ser]


def test_sweep_rejects_bad_betas():
    with pytest.raises(InvalidParameter):
        sweep_curve(IdentityT(), Identity(), [])
    with pytest.raises(InvalidParameter):
        sweep_curve(IdentityT(), Identity(), [0.0])


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 2.0))
def test_beta_for_kl_hits_target(target):
    for t in (IdentityT(), ExpTilt(-10)):
        beta = beta_for_kl(t, target)
        assert kl_divergence(build_tilted(t, beta)) == pytest.approx(target, rel=1e-7)


def test_coarse_grid_warns_and_resolved_grid_does_not():
    # far too coarse: every quadrature node sits many nats below the peak
    with pytest.warns(RuntimeWarning):
        p = build_tilted(ExpTilt(10), 0.05, 101)
    assert p.integrate_nodes(p.node_density) == pytest.approx(1.0)
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        p = build_resolved(ExpTilt(10), 20.0, 101)
    assert p.M > 101


def test_grid_validation():
    for bad in (2, 100, 1.5):
        with pytest.raises(InvalidParameter):
            build_tilted(IdentityT(), 1.0, bad)


def test_refinement_is_thread_safe():
    # grid refinement must not flip warning filters seen by other threads
    t = ExpTilt(10.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        with ThreadPoolExecutor(4) as pool:
            jobs = [pool.submit(analytic.build_resolved if i % 2 else analytic.build_tilted, t, 0.05, 2001)
                    for i in range(16)]
            policies = [j.result() for j in jobs]
    assert all(len(p.grid) > 2001 for p in policies[1::2])
