import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from infalign.errors import ConfigError, DomainError, InvalidParameter
from infalign.transforms import (
    Constant,
    ExpTilt,
    Identity,
    Log,
    Tabulated,
    compose,
    evaluate,
    format_table_csv,
    is_nondecreasing,
    parse_transform,
    read_table_csv,
    tabulate,
    write_table_csv,
)


def test_point_values():
    assert evaluate(ExpTilt(10), 0.0) == 1.0
    assert evaluate(ExpTilt(-10), 0.0) == -1.0
    assert evaluate(Identity(), 0.37) == 0.37
    assert evaluate(Log(), 0.0) == pytest.approx(math.log(1e-6), rel=1e-15)
    assert evaluate(Log(), 0.0) == pytest.approx(-13.8155, abs=1e-4)


def test_compose_values():
    assert compose(Identity(), 0.375) == 0.375
    assert compose(ExpTilt(10), 0.5) == pytest.approx(math.exp(5), rel=1e-15)
    assert compose(ExpTilt(10), 0.5) == pytest.approx(148.4132, abs=1e-4)
    assert compose(ExpTilt(-10), 1.0) == pytest.approx(-4.53999e-5, rel=1e-5)


def test_domain_checked():
    with pytest.raises(DomainError):
        evaluate(Identity(), 1.5)
    with pytest.raises(DomainError):
        evaluate(Identity(), -0.1)


def test_sign_of_zero_tilt_is_positive():
    assert evaluate(ExpTilt(0.0), 0.3) == 1.0


@pytest.mark.parametrize("t", [Identity(), Log(), Log(1e-3), ExpTilt(5), ExpTilt(-5), ExpTilt(10),
                               ExpTilt(-10), ExpTilt(0.01), ExpTilt(-0.01)])
def test_standard_transforms_nondecreasing(t):
    assert is_nondecreasing(t)


@given(st.floats(-50, 50).filter(lambda t: t != 0), st.floats(0, 1), st.floats(0, 1))
def test_exp_tilt_increasing(t, a, b):
    lo, hi = sorted((a, b))
    f = ExpTilt(t)
    assert float(f(lo)) <= float(f(hi))


def test_tabulated_interpolates_linearly():
    tab = Tabulated([0.0, 1.0, 4.0])
    assert float(tab(0.25)) == 0.5
    assert float(tab(0.75)) == 2.5
    with pytest.raises(InvalidParameter):
        Tabulated([1.0])
    with pytest.raises(InvalidParameter):
        Tabulated([0.0, float("nan")])


def test_tabulate_reproduces_grid_values():
    tab = tabulate(ExpTilt(3), size=11)
    u = np.linspace(0, 1, 11)
    assert np.array_equal(tab(u), ExpTilt(3)(u))


def test_table_csv_round_trip(tmp_path):
    vals = np.sin(np.linspace(0, 1, 17)) / 3.0
    path = tmp_path / "t.csv"
    write_table_csv(path, vals, {"N": 4, "converged": "true"})
    text = path.read_text()
    assert text.startswith("# N=4\n# converged=true\nu,phi\n")
    assert text == format_table_csv(vals, {"N": 4, "converged": "true"})
    back = read_table_csv(path)
    assert np.array_equal(back.values, vals)  # repr floats round-trip exactly
    assert parse_transform(f"table:{path}") == back


def test_table_csv_rejects_bad_grid(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("u,phi\n0.0,1.0\n0.3,2.0\n1.0,3.0\n")
    with pytest.raises(ConfigError):
        read_table_csv(path)


@pytest.mark.parametrize("spec, expected", [
    ("identity", Identity()),
    ("log", Log()),
    ("log:0.001", Log(0.001)),
    ("exp:10", ExpTilt(10.0)),
    ("exp:-5", ExpTilt(-5.0)),
    ("const:2", Constant(2.0)),
])
def test_parse(spec, expected):
    t = parse_transform(spec)
    assert t == expected
    assert parse_transform(t.label) == t


@pytest.mark.parametrize("spec", ["", "exp", "exp:x", "cubic", "identity:3", "table:/no/such/file.csv"])
def test_parse_rejects(spec):
    with pytest.raises(ConfigError):
        parse_transform(spec)
