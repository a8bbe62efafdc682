import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import monotone_cubic_scalar, scalar_sigmoid
from survplanes.domain import Visit
from survplanes.encoder import EncoderParams
from survplanes.exceptions import DegenerateDistributionError
from survplanes.head import (HyperplaneHead, RiskCalibrator, calibrate, fit_calibrator,
                             inverse_softplus, predict_multiview)


def head_with(w, alpha=1.0, beta=0.0):
    return HyperplaneHead(np.asarray(w, dtype=float), beta, float(inverse_softplus(alpha)))


class TestRisk:
    def test_zero_weights(self):
        assert head_with([0, 0, 0]).risk([1.0, -2.0, 3.0]) == 0.0

    def test_basis_projection(self):
        assert head_with([1, 0]).risk([3, 5]) == 3.0

    def test_dot_product(self):
        assert head_with([0.5, -0.25, 2]).risk([2, 4, 1]) == pytest.approx(2.0, abs=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            head_with([1, 0]).risk([1, 2, 3])

    def test_batch(self):
        h = head_with([1, 2])
        np.testing.assert_allclose(h.risk(np.array([[1, 1], [0, 1]])), [3, 2])


class TestBias:
    def test_zero_time_is_beta(self):
        assert head_with([1], alpha=3.0, beta=-0.7).bias_at(0.0) == pytest.approx(-0.7)

    def test_cancellation(self):
        assert head_with([1], alpha=2.0, beta=-1.0).bias_at(0.5) == pytest.approx(0.0, abs=1e-12)

    def test_closed_form(self):
        assert head_with([1], alpha=1.5, beta=0.2).bias_at(1.0) == pytest.approx(1.7, abs=1e-12)

    def test_alpha_is_non_negative(self):
        assert HyperplaneHead(np.ones(2), 0.0, -40.0).alpha >= 0.0


class TestCdf:
    def test_symmetry_point(self):
        h = head_with([1.0], alpha=2.0, beta=-1.0)
        assert h.cdf_at([0.0], 0.5) == pytest.approx(0.5, abs=1e-12)

    def test_sigmoid_two(self):
        h = HyperplaneHead(np.array([1.0]), 0.0, -60.0)
        assert h.cdf_at([2.0], 0.0) == pytest.approx(0.880797, abs=5e-7)

    def test_stage_proba_is_cdf_at_zero(self, rng):
        h = HyperplaneHead.initialize(4, rng)
        f = rng.normal(size=(5, 4))
        np.testing.assert_array_equal(h.stage_proba(f), h.cdf_at(f, 0.0))

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5),
           st.floats(0, 3), st.floats(0, 3))
    def test_monotone_in_time(self, r, beta, alpha_raw, t1, t2):
        h = HyperplaneHead(np.array([1.0]), beta, alpha_raw)
        lo, hi = sorted((t1, t2))
        assert h.cdf_at([r], lo) <= h.cdf_at([r], hi)

    def test_matches_scalar_sigmoid(self, rng):
        h = HyperplaneHead(rng.normal(size=3), 0.3, 0.2)
        f = rng.normal(size=3)
        alpha = math.log1p(math.exp(0.2))
        expected = scalar_sigmoid(float(np.dot(h.w, f)) + alpha * 0.75 + 0.3)
        assert h.cdf_at(f, 0.75) == pytest.approx(expected, rel=1e-14)


class TestMultiview:
    def setup_method(self):
        self.enc = EncoderParams((np.eye(2),), (np.zeros(2),))
        self.head = HyperplaneHead(np.array([1.0, 0.0]), 0.0, -60.0)

    def test_single_view(self):
        v = Visit("a", 0, [0.3, 1.0])
        assert predict_multiview(self.head, self.enc, v, 0.0) == pytest.approx(
            float(self.head.cdf_at([0.3, 1.0], 0.0)))

    def test_two_views_average(self):
        logit = math.log(0.4 / 0.6)
        v = Visit("a", 0, [0, 0], views=[[logit, 0], [-logit, 0]])
        assert predict_multiview(self.head, self.enc, v, 0.0) == pytest.approx(0.5)

    def test_three_views(self, rng):
        views = rng.normal(size=(3, 2))
        v = Visit("a", 0, [0, 0], views=views)
        expected = np.mean([scalar_sigmoid(x[0]) for x in views])
        assert predict_multiview(self.head, self.enc, v, 0.0) == pytest.approx(expected)


class TestCalibrator:
    def test_uniform_is_linear(self):
        cal = fit_calibrator(np.arange(101.0))
        assert calibrate(cal, 50.0) == pytest.approx(0.5, abs=1e-12)
        assert calibrate(cal, 25.0) == pytest.approx(0.25, abs=1e-12)

    def test_knots_exact(self, rng):
        cal = fit_calibrator(rng.normal(size=200))
        for k, x in enumerate(cal.knot_risks):
            assert calibrate(cal, x) == k / 10

    def test_clamping(self, rng):
        r = rng.normal(size=50)
        cal = fit_calibrator(r)
        assert calibrate(cal, r.min() - 1) == 0.0
        assert calibrate(cal, r.max() + 1) == 1.0

    def test_median_knot(self, rng):
        cal = fit_calibrator(rng.exponential(size=99))
        assert calibrate(cal, cal.knot_risks[5]) == pytest.approx(0.5, abs=1e-15)

    def test_matches_independent_monotone_cubic(self, rng):
        r = rng.gamma(2.0, size=300)
        cal = fit_calibrator(r)
        xs, ys = cal.knot_risks.tolist(), cal.knot_values.tolist()
        for q in rng.uniform(r.min() - 0.5, r.max() + 0.5, size=200):
            assert calibrate(cal, q) == pytest.approx(monotone_cubic_scalar(xs, ys, q),
                                                      abs=1e-12)

    def test_tied_knots_collapse(self):
        r = np.concatenate([np.zeros(60), np.linspace(1, 2, 40)])
        cal = fit_calibrator(r)
        assert np.all(np.diff(cal.knot_risks) > 0)
        assert 0.0 <= calibrate(cal, 0.0) <= 1.0
        grid = np.linspace(-1, 3, 500)
        assert np.all(np.diff(calibrate(cal, grid)) >= 0)

    def test_errors(self):
        with pytest.raises(DegenerateDistributionError):
            fit_calibrator(np.ones(20))
        with pytest.raises(ValueError):
            fit_calibrator(np.arange(5.0))
        with pytest.raises(ValueError):
            fit_calibrator(np.r_[np.arange(20.0), np.nan])

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, st.integers(11, 60), elements=st.floats(-100, 100)),
           arrays(np.float64, 30, elements=st.floats(-150, 150)))
    def test_monotone_property(self, risks, queries):
        if np.all(risks == risks[0]):
            return
        cal = fit_calibrator(risks)
        q = np.sort(queries)
        out = calibrate(cal, q)
        assert np.all(np.diff(out) >= 0)
        assert np.all((out >= 0) & (out <= 1))

    def test_continuous_at_interior_knot_to_the_ulp(self):
        cal = fit_calibrator(np.array([0.0, -1.0] + [1.0] * 9))
        left = calibrate(cal, np.nextafter(0.0, -1.0))
        assert left <= calibrate(cal, 0.0) == 0.1

    def test_estimator_wrapper(self, rng):
        r = rng.normal(size=40)
        est = RiskCalibrator().fit(r)
        np.testing.assert_array_equal(est.transform(r), calibrate(est.calibrator_, r))
