import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from metahrl.errors import DomainError
from metahrl.metrics import (
    cumulative_reward,
    empirical_cdf,
    fmt,
    jain_index,
    moving_average,
    shots_to_converge,
    summarize,
    write_cdf_csv,
    write_csv,
)

positive = st.lists(st.floats(0.01, 1e6), min_size=1, max_size=30)


class TestCumulativeReward:
    def test_examples(self):
        assert cumulative_reward([0, 0, 0]) == 0
        assert cumulative_reward([1], 0.3) == 1
        assert cumulative_reward([1, 1, 1], 0.5) == 1.75

    def test_empty(self):
        assert cumulative_reward([]) == 0.0

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.floats(-3, 3))
    def test_linear(self, r, c):
        assert cumulative_reward(np.asarray(r) * c) == pytest.approx(c * cumulative_reward(r), abs=1e-9)


class TestCdf:
    def test_single(self):
        assert empirical_cdf([5]) == [(5.0, 1.0)]

    def test_ties(self):
        cdf = empirical_cdf([1, 2, 2, 4])
        assert [v for v, _ in cdf] == [1, 2, 4]
        assert_allclose([f for _, f in cdf], [0.25, 0.75, 1.0])

    def test_empty(self):
        with pytest.raises(DomainError):
            empirical_cdf([])

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
    def test_monotone(self, x):
        cdf = np.array(empirical_cdf(x))
        assert np.all(np.diff(cdf[:, 0]) > 0)
        assert np.all(np.diff(cdf[:, 1]) > 0)
        assert cdf[-1, 1] == 1.0


class TestJain:
    def test_examples(self):
        assert jain_index([3, 3, 3, 3]) == pytest.approx(1.0)
        assert jain_index([0, 0, 5, 0]) == pytest.approx(0.25)
        assert jain_index([1, 2, 3]) == pytest.approx(36 / 42)
        assert jain_index([1, 2, 3]) == pytest.approx(0.857, abs=1e-3)

    @pytest.mark.parametrize("bad", [[0, 0], [], [1, -1]])
    def test_errors(self, bad):
        with pytest.raises(DomainError):
            jain_index(bad)

    @given(positive, st.floats(1e-3, 1e3), st.randoms(use_true_random=False))
    def test_invariances(self, x, c, rnd):
        j = jain_index(x)
        assert 0 < j <= 1 + 1e-12
        assert jain_index(np.asarray(x) * c) == pytest.approx(j, rel=1e-9)
        perm = list(x)
        rnd.shuffle(perm)
        assert jain_index(perm) == pytest.approx(j, rel=1e-12)


class TestShots:
    def test_constant(self):
        assert shots_to_converge([2.0] * 10) == 1

    def test_plateau_at_seventeen(self):
        # strictly increasing to 1.0 at shot 17, flat afterwards; by hand the
        # window-3 mean is 0.93 at shot 16 and (0.93 + 0.96 + 1) / 3 = 0.963 at 17
        trace = list(np.linspace(0.0, 0.90, 14)) + [0.93, 0.96] + [1.0] * 14
        assert np.all(np.diff(trace[:17]) > 0)
        assert shots_to_converge(trace) == 17

    def test_never_plateaus(self):
        trace = [0.0] * 9 + [1.0]
        assert shots_to_converge(trace) == 10

    def test_negative_rewards(self):
        assert shots_to_converge([-10.0, -10.0, -1.0, -1.0, -1.0, -1.0, -1.0]) == 5

    def test_empty(self):
        with pytest.raises(DomainError):
            shots_to_converge([])

    def test_moving_average(self):
        assert_allclose(moving_average([3, 6, 9, 12]), [3, 4.5, 6, 9])


def test_summarize():
    s = summarize([1, 2, 3, 4, 100])
    assert s["median"] == 3 and s["max"] == 100 and s["min"] == 1
    assert s["mean"] == 22


def test_csv_round_trip(tmp_path):
    path = write_csv(tmp_path / "sub" / "x.csv", ["a", "b"], [(1, 0.1), (np.int64(2), np.float64(1 / 3))])
    assert path.read_text() == "a,b\n1,0.1\n2,0.3333333333333333\n"
    assert float(fmt(np.float64(1 / 3))) == 1 / 3
    cdf = write_cdf_csv(tmp_path / "c.csv", [2, 1])
    assert cdf.read_text().splitlines() == ["value,fraction", "1.0,0.5", "2.0,1.0"]
