import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from infalign.calibration import (
    CalibrationTable,
    RewardRecord,
    build_table,
    build_tables,
    calibrate_against,
    calibrate_many,
    check_monotone_invariance,
    dkw_error_bound,
    empirical_calibrate,
)
from infalign.errors import InvalidParameter, InvalidReward, MissingPrompt

finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)


def recs(prompt, rewards):
    return [RewardRecord(prompt, f"{prompt}-{i}", r) for i, r in enumerate(rewards)]


def table(rewards, prompt="p"):
    return build_table(recs(prompt, rewards), prompt)


@pytest.mark.parametrize("rewards, expected", [
    ([3.0, 1.0, 2.0], (1.0, 2.0, 3.0)),
    ([5.0], (5.0,)),
    ([2.0, 2.0], (2.0, 2.0)),
])
def test_build_table_sorts_and_keeps_duplicates(rewards, expected):
    t = table(rewards)
    assert t.sorted_rewards == expected
    assert t.K == len(expected)


def test_build_table_only_uses_its_prompt():
    records = recs("a", [1.0, 2.0]) + recs("b", [9.0])
    assert build_table(records, "a").sorted_rewards == (1.0, 2.0)
    with pytest.raises(MissingPrompt):
        build_table(records, "c")


def test_nonfinite_reward_rejected():
    with pytest.raises(InvalidReward):
        RewardRecord("p", "r", float("nan"))
    with pytest.raises(InvalidReward):
        empirical_calibrate(table([1.0]), float("inf"))


def test_duplicate_response_rejected():
    with pytest.raises(InvalidParameter):
        build_tables([RewardRecord("p", "r", 1.0), RewardRecord("p", "r", 2.0)])


@pytest.mark.parametrize("reward, expected", [(2.5, 0.5), (2.0, 0.375), (5.0, 1.0), (0.0, 0.0)])
def test_calibrate_hand_counts(reward, expected):
    assert empirical_calibrate(table([1.0, 2.0, 3.0, 4.0]), reward) == expected


def test_missing_prompt_fails_loudly():
    tables = build_tables(recs("a", [1.0, 2.0]))
    assert calibrate_against(tables, "a", 1.5) == 0.5
    with pytest.raises(MissingPrompt):
        calibrate_against(tables, "b", 1.0)


def test_dkw_bound_values():
    delta = 2.0 / math.e**2  # log(2/delta) = 2
    assert dkw_error_bound(100, delta) == pytest.approx(0.1, abs=1e-15)
    assert dkw_error_bound(400, 0.05) == pytest.approx(dkw_error_bound(100, 0.05) / 2, rel=1e-14)
    assert dkw_error_bound(50, 1 - 1e-12) == pytest.approx(math.sqrt(math.log(2) / 100), rel=1e-9)
    for bad in (0.0, 1.0, 1.5):
        with pytest.raises(InvalidParameter):
            dkw_error_bound(100, bad)


def test_monotone_invariance_examples():
    t = table([0.3, -1.0, 2.0, 2.0, 7.5])
    probes = [-2.0, -1.0, 0.0, 2.0, 3.0, 8.0]
    assert check_monotone_invariance(t, lambda r: 2 * r + 1, probes)
    assert check_monotone_invariance(t, math.exp, probes)
    # a constant map collapses distinct rewards, so the invariance precondition fails
    assert not check_monotone_invariance(t, lambda r: 1.0, probes)


@given(st.lists(finite, min_size=1, max_size=50), finite, finite)
def test_bounded_and_monotone(rewards, r1, r2):
    t = table(rewards)
    c1, c2 = empirical_calibrate(t, r1), empirical_calibrate(t, r2)
    assert 0.0 <= c1 <= 1.0
    if r1 >= r2:
        assert c1 >= c2


@given(st.lists(finite, min_size=1, max_size=50), st.lists(finite, min_size=1, max_size=20),
       st.floats(0.1, 10), st.floats(-5, 5))
def test_affine_invariance_property(rewards, probes, a, b):
    assert check_monotone_invariance(table(rewards), lambda r: a * r + b, probes) or _affine_collapses(
        rewards + probes, a, b)


def _affine_collapses(values, a, b):
    # float rounding can merge two distinct inputs; that breaks strictness, not the invariance
    mapped = {a * v + b for v in set(values)}
    return len(mapped) < len(set(values))


@given(st.lists(finite, min_size=1, max_size=40), st.lists(finite, min_size=1, max_size=40))
def test_vectorised_matches_scalar(rewards, probes):
    t = table(rewards)
    got = calibrate_many(t, probes)
    assert list(got) == [empirical_calibrate(t, r) for r in probes]


def test_table_invariants():
    with pytest.raises(InvalidParameter):
        CalibrationTable("p", (2.0, 1.0))
    with pytest.raises(MissingPrompt):
        CalibrationTable("p", ())


def test_self_scored_table_is_symmetric():
    # each sample scored against its own table averages to exactly 1/2
    rng = np.random.default_rng(3)
    rewards = list(rng.integers(0, 5, size=40).astype(float))
    t = table(rewards)
    assert np.mean(calibrate_many(t, rewards)) == pytest.approx(0.5, abs=1e-15)
