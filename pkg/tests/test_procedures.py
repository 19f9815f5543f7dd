import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad

from infalign.errors import ConfigError, InvalidParameter, UnsupportedProcedure
from infalign.procedures import (
    BestOfN,
    Custom,
    Identity,
    RewindRepeat,
    WorstOfN,
    parse_procedure,
    read_custom_csv,
)

U = np.linspace(0, 1, 101)


def test_bon_won_g():
    assert np.allclose(BestOfN(3).g(U), U**2)
    assert np.allclose(WorstOfN(3).g(U), (1 - U) ** 2)
    assert np.array_equal(Identity().g(U), np.ones_like(U))


@pytest.mark.parametrize("phi", [0.0, 1.0])
def test_rewind_degenerate_thresholds(phi):
    assert np.array_equal(RewindRepeat(phi, 8).g(U), np.ones_like(U))


def test_rewind_half_two_draws():
    p = RewindRepeat(0.5, 2)
    assert p.levels() == (0.5, 1.5)
    assert p.g_integral() == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("proc", [Identity(), BestOfN(1), BestOfN(4), BestOfN(32), WorstOfN(2), WorstOfN(32),
                                  RewindRepeat(0.85, 32), RewindRepeat(0.3, 3), RewindRepeat(0.5, 2)])
def test_G_is_integral_of_g(proc):
    for u in (0.0, 0.2, 0.5, 0.85, 0.9, 1.0):
        ref, _ = quad(lambda s: float(proc.g(s)), 0, u, points=[0.85, 0.3, 0.5] if 0 < u else None, limit=200)
        assert float(proc.G(u)) == pytest.approx(ref, abs=1e-12)
    # normalised density g / int g has unit mass
    total, _ = quad(lambda s: float(proc.g(s)) / proc.g_integral(), 0, 1, points=[0.3, 0.5, 0.85], limit=200)
    assert total == pytest.approx(1.0, abs=1e-8)


@given(st.floats(0.0, 1.0), st.integers(1, 64))
def test_rewind_g_is_output_density(phi, n):
    # mass of the output distribution matches direct simulation-free accounting
    p = RewindRepeat(phi, n)
    lo, hi = p.levels()
    assert lo >= 0 and hi >= lo
    assert lo * phi + hi * (1 - phi) == pytest.approx(1.0, abs=1e-12) or p.degenerate


def test_best_fallback_has_no_closed_form():
    p = RewindRepeat(0.85, 32, "best")
    with pytest.raises(UnsupportedProcedure):
        p.g(U)


def test_custom_from_csv(tmp_path):
    path = tmp_path / "g.csv"
    path.write_text("# comment\nu,g\n0.0,0.0\n0.5,1.0\n1.0,2.0\n")
    c = read_custom_csv(path)
    assert float(c.G(1.0)) == pytest.approx(1.0)
    assert float(c.G(0.5)) == pytest.approx(0.25)
    assert np.allclose(c.g(U), 2 * U)
    with pytest.raises(InvalidParameter):
        Custom(np.array([1.0, -1.0]))


@pytest.mark.parametrize("spec, label", [
    ("identity", "identity"),
    ("bon:4", "bon:4"),
    ("won:2", "won:2"),
    ("rewind:0.85:32", "rewind:0.85:32:last"),
    ("rewind:0.85:32:best", "rewind:0.85:32:best"),
])
def test_parse(spec, label):
    assert parse_procedure(spec).label == label


def test_parse_default_fallback():
    assert parse_procedure("rewind:0.5:4", rewind_fallback="best").fallback == "best"


@pytest.mark.parametrize("spec", ["bon", "bon:0", "bon:x", "rewind:1.5:3", "rewind:0.5:3:first", "median:3",
                                  "custom:/missing.csv"])
def test_parse_rejects(spec):
    with pytest.raises(ConfigError):
        parse_procedure(spec)
