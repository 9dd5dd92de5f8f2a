import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selection import (
    SelectionMask,
    SmoothingSchedule,
    band,
    canonical_quantile_mode,
    canonical_schedule,
    entropy_gate,
    iqr_mask,
    quartiles,
    required_fraction,
    smoothing_value,
    ua_mask,
)

MODES = ("minmax-interp", "order-stat")
FAMILIES = ("linear", "exponential", "logarithmic")


def brute_quartiles(batch, mode):
    """Per-dimension quartiles written out with plain loops."""
    n, d = len(batch), len(batch[0])
    q1, q3 = [], []
    for j in range(d):
        column = sorted(batch[i][j] for i in range(n))
        if mode == "minmax-interp":
            lo, hi = column[0], column[-1]
            q1.append(lo + 0.25 * (hi - lo))
            q3.append(lo + 0.75 * (hi - lo))
        else:
            for q, out in ((0.25, q1), (0.75, q3)):
                pos = (n - 1) * q
                below = int(math.floor(pos))
                above = min(below + 1, n - 1)
                out.append(column[below] + (pos - below) * (column[above] - column[below]))
    return q1, q3


def brute_iqr_mask(batch, mode, f, beta):
    q1, q3 = brute_quartiles(batch, mode)
    need = 1.0 if f >= 1.0 else beta + (1 - beta) * f
    picked = []
    for row in batch:
        inside = 0
        for j, value in enumerate(row):
            iqr = q3[j] - q1[j]
            if q1[j] - 1.5 * f * iqr <= value <= q3[j] + 1.5 * f * iqr:
                inside += 1
        picked.append(inside / len(row) >= need)
    return picked


def brute_ua_mask(rows, gamma_m, gamma_u, mu):
    return [m <= gamma_m and u1 + mu * u2 >= gamma_u for m, u1, u2 in rows]


class TestSmoothingSchedule:
    @pytest.mark.parametrize("family", FAMILIES)
    def test_boundaries_are_exact(self, family):
        for total in (1, 7, 50, 125):
            schedule = SmoothingSchedule(family, total)
            assert smoothing_value(schedule, 0) == 0.0
            assert smoothing_value(schedule, total) == 1.0

    def test_exponential_midpoint(self):
        assert smoothing_value(SmoothingSchedule("exponential", 100), 50) == pytest.approx(math.sqrt(2) - 1, abs=1e-12)

    def test_logarithmic_midpoint(self):
        value = smoothing_value(SmoothingSchedule("logarithmic", 100), 50)
        assert value == pytest.approx(math.log((math.e - 1) * 0.5 + 1), rel=1e-12)
        assert value == pytest.approx(0.6201, abs=1e-4)

    def test_linear(self):
        assert SmoothingSchedule("linear", 8).value(2) == 0.25

    @pytest.mark.parametrize("family", FAMILIES)
    def test_nondecreasing(self, family):
        schedule = SmoothingSchedule(family, 40)
        values = [smoothing_value(schedule, t) for t in range(41)]
        assert all(b >= a for a, b in zip(values, values[1:]))

    @pytest.mark.parametrize("t", [-1, 11])
    def test_out_of_range(self, t):
        with pytest.raises(ValueError):
            smoothing_value(SmoothingSchedule("linear", 10), t)

    def test_aliases(self):
        assert SmoothingSchedule("exp", 3).family == "exponential"
        assert canonical_schedule("log") == "logarithmic"
        assert canonical_quantile_mode("order") == "order-stat"
        with pytest.raises(ValueError):
            canonical_quantile_mode("median")


class TestQuartiles:
    @pytest.mark.parametrize("mode", MODES)
    def test_even_spacing(self, mode):
        stats = quartiles(np.array([[1.0], [2.0], [3.0], [4.0]]), mode)
        assert (stats.q1[0], stats.q3[0], stats.iqr[0]) == (1.75, 3.25, 1.5)

    def test_skewed_minmax(self):
        stats = quartiles(np.array([[1.0], [2.0], [3.0], [10.0]]), "minmax-interp")
        assert (stats.q1[0], stats.q3[0], stats.iqr[0]) == (3.25, 7.75, 4.5)

    def test_skewed_order_stat(self):
        stats = quartiles(np.array([[1.0], [2.0], [3.0], [10.0]]), "order-stat")
        assert (stats.q1[0], stats.q3[0], stats.iqr[0]) == (1.75, 4.75, 3.0)

    @pytest.mark.parametrize("mode", MODES)
    def test_single_sample(self, mode):
        stats = quartiles(np.array([[0.3, -2.0]]), mode)
        np.testing.assert_array_equal(stats.q1, [0.3, -2.0])
        np.testing.assert_array_equal(stats.iqr, [0.0, 0.0])

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            quartiles(np.zeros((0, 3)))

    @given(st.lists(st.lists(st.floats(-100, 100), min_size=3, max_size=3), min_size=1, max_size=20),
           st.sampled_from(MODES))
    @settings(max_examples=200, deadline=None)
    def test_q3_not_below_q1(self, rows, mode):
        stats = quartiles(np.array(rows), mode)
        assert (stats.q3 >= stats.q1).all()
        assert (stats.iqr >= 0).all()


class TestIqrMask:
    @pytest.mark.parametrize("mode", MODES)
    def test_matches_brute_force(self, mode):
        gen = np.random.default_rng(42)
        for trial in range(100):
            batch = gen.standard_t(df=3, size=(16, 64))
            total = 20
            t = int(gen.integers(0, total + 1))
            beta = float(gen.choice([0.0, 0.6, 0.9, 1.0]))
            schedule = SmoothingSchedule("linear", total)
            mask = iqr_mask(batch, quartiles(batch, mode), schedule, t, beta)
            expected = brute_iqr_mask(batch.tolist(), mode, t / total, beta)
            assert mask.selected.tolist() == expected, trial

    def test_single_sample_selected(self):
        batch = np.array([[0.5, -1.0, 2.0]])
        mask = iqr_mask(batch, quartiles(batch), SmoothingSchedule("linear", 10), 0, 0.6)
        assert mask.selected.tolist() == [True]

    def test_minmax_saturation(self):
        gen = np.random.default_rng(7)
        total = 30
        schedule = SmoothingSchedule("linear", total)
        saturated = [t for t in range(total + 1) if smoothing_value(schedule, t) >= 1 / 3]
        for _ in range(1000):
            n, d = int(gen.integers(1, 33)), int(gen.integers(1, 65))
            batch = gen.normal(size=(n, d)) * gen.exponential(3.0, size=d)
            stats = quartiles(batch, "minmax-interp")
            t = int(gen.choice(saturated))
            beta = float(gen.uniform(0, 1))
            assert iqr_mask(batch, stats, schedule, t, beta).selected.all()

    @pytest.mark.parametrize("mode", MODES)
    def test_band_widens_with_time(self, mode):
        batch = np.random.default_rng(3).normal(size=(16, 10))
        stats = quartiles(batch, mode)
        bounds = [band(stats, f) for f in np.linspace(0, 1, 11)]
        for (lo_a, hi_a), (lo_b, hi_b) in zip(bounds, bounds[1:]):
            assert (lo_b <= lo_a).all() and (hi_b >= hi_a).all()

    def test_required_fraction_boundaries(self):
        assert required_fraction(0.6, 0.0) == 0.6
        assert required_fraction(0.6, 1.0) == 1.0

    def test_beta_out_of_range(self):
        batch = np.zeros((2, 2))
        with pytest.raises(ValueError):
            iqr_mask(batch, quartiles(batch), SmoothingSchedule("linear", 1), 0, 1.2)

    def test_reports_fraction(self):
        batch = np.array([[0.0, 0.0], [0.0, 0.0], [0.0, 100.0]])
        mask = iqr_mask(batch, quartiles(batch, "order-stat"), SmoothingSchedule("linear", 4), 0, 0.6)
        np.testing.assert_allclose(mask.in_band_fraction, [1.0, 1.0, 0.5])
        assert mask.selected.tolist() == [True, True, False]


class TestUaMask:
    def test_matches_brute_force(self):
        gen = np.random.default_rng(9)
        for _ in range(100):
            rows = gen.uniform(0, math.log(8), size=(16, 3))
            gamma_m, gamma_u, mu = 0.4 * math.log(8), math.exp(-1), float(gen.uniform(0, 2))
            mask = ua_mask(rows, gamma_m, gamma_u, mu)
            assert mask.selected.tolist() == brute_ua_mask(rows.tolist(), gamma_m, gamma_u, mu)

    def test_uniform_multimodal_excluded(self):
        for c in (2, 8, 50):
            mask = ua_mask([[math.log(c), math.log(c), math.log(c)]], 0.4 * math.log(c), math.exp(-1), 1.0)
            assert not mask.selected[0]

    def test_confident_fusion_selected(self):
        c = 8
        mask = ua_mask([[0.0, math.log(c), math.log(c)]], 0.4 * math.log(c), math.exp(-1), 1.0)
        assert mask.selected[0]

    def test_all_confident_excluded(self):
        mask = ua_mask([[0.0, 0.0, 0.0]], 0.4 * math.log(8), math.exp(-1), 1.0)
        assert not mask.selected[0]

    def test_comparisons_are_inclusive(self):
        mask = ua_mask([[0.5, 0.25, 0.25]], 0.5, 0.5, 1.0)
        assert mask.selected[0]

    def test_modality_order_moves_mu(self):
        rows = [[0.0, 0.1, 0.4]]
        assert not ua_mask(rows, 1.0, 0.35, 0.5, ("u1", "u2")).selected[0]
        assert ua_mask(rows, 1.0, 0.35, 0.5, ("u2", "u1")).selected[0]

    def test_negative_entropy_rejected(self):
        with pytest.raises(ValueError):
            ua_mask([[-0.1, 0.0, 0.0]], 1.0, 0.1, 1.0)


class TestMasks:
    def test_restrict_intersects(self):
        a = SelectionMask(np.array([True, True, False]), in_band_fraction=np.ones(3))
        b = SelectionMask(np.array([True, False, True]), ent_m=np.zeros(3))
        both = a.restrict(b)
        assert both.indices == [0]
        assert both.in_band_fraction is not None and both.ent_m is not None

    def test_restrict_length_mismatch(self):
        with pytest.raises(ValueError):
            SelectionMask(np.ones(2, dtype=bool)).restrict(SelectionMask(np.ones(3, dtype=bool)))

    def test_entropy_gate(self):
        assert entropy_gate([0.1, 0.5, 0.9], 0.5).indices == [0, 1]
