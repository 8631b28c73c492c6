import math
from dataclasses import replace

import numpy as np
import pytest

from drcurve import simulate as sim
from drcurve.estimator import (
    EffectCurve,
    add_wald_ci,
    default_grid,
    estimate_curve,
    read_curve_csv,
    smoothed_target,
)
from drcurve.exceptions import DomainError
from drcurve.kernels import KernelSpec, kernel_moments, smoother_row
from drcurve.nuisance import (
    Dataset,
    FeatureMap,
    fit_outcome_regression,
    fit_treatment_density_beta,
    marginalize,
)
from drcurve.pseudo import compute_pseudo


@pytest.fixture(scope="module")
def bundle():
    data = sim.generate_data(600, 21)
    fit = sim.fit_nuisances(data)
    grid = default_grid(data.treatment, size=41)
    return data, fit, grid


class ShiftedOutcome:
    def __init__(self, base, shift):
        self.base = base
        self.shift = shift

    def rowwise(self, rows, a):
        return self.base.rowwise(rows, a) + self.shift

    def grid(self, rows, a):
        return self.base.grid(rows, a) + self.shift


class TestEstimateCurve:
    def test_reg_equals_marginal_regression(self, bundle):
        data, fit, grid = bundle
        curve = estimate_curve(data, fit, grid, None, "reg")
        np.testing.assert_array_equal(curve.estimates, fit.reg_curve(grid))
        assert curve.kind == "reg" and math.isnan(curve.bandwidth)

    def test_affine_pseudo_outcomes_reproduced(self):
        # Covariate-free data with an affine outcome makes the pseudo-
        # outcome exactly affine in the treatment.
        rng = np.random.default_rng(22)
        n = 120
        a = rng.uniform(1, 9, n)
        y = 2.0 + 0.3 * a
        data = Dataset(np.zeros((n, 0)), a, y, (0.0, 10.0))
        dens = fit_treatment_density_beta(data, FeatureMap(("1",)), total=10.0)
        mu = fit_outcome_regression(data, FeatureMap(("1",)), link="identity")
        fit = marginalize(data, dens, mu).with_zero_outcome()
        grid = np.linspace(2, 8, 25)
        curve = estimate_curve(data, fit, grid, KernelSpec("epanechnikov", 1.5), "dr")
        np.testing.assert_allclose(curve.estimates, 2.0 + 0.3 * grid, atol=1e-10)

    def test_smoother_row_composition_matches(self, bundle):
        data, fit, grid = bundle
        spec = KernelSpec("epanechnikov", 1.4)
        curve = estimate_curve(data, fit, grid, spec, "dr")
        pseudo = compute_pseudo(data, fit)
        for j in range(0, len(grid), 5):
            w = smoother_row(data.treatment, float(grid[j]), spec)
            assert curve.estimates[j] == pytest.approx(w @ pseudo.values, abs=1e-12)

    def test_ipw_equals_dr_with_zero_outcome(self, bundle):
        data, fit, grid = bundle
        spec = KernelSpec("epanechnikov", 1.6)
        ipw = estimate_curve(data, fit, grid, spec, "ipw")
        dr_zero = estimate_curve(data, fit.with_zero_outcome(), grid, spec, "dr")
        np.testing.assert_allclose(ipw.estimates, dr_zero.estimates, atol=1e-12)

    def test_outcome_shift_equivariance(self, bundle):
        data, fit, _ = bundle
        grid = np.linspace(3, 9, 15)
        spec = KernelSpec("epanechnikov", 1.8)
        c = 0.75
        base = estimate_curve(data, fit, grid, spec, "dr")
        shifted_data = Dataset(
            data.covariates, data.treatment, data.outcome + c, data.support
        )
        shifted_fit = replace(
            fit,
            outcome_reg=ShiftedOutcome(fit.outcome_reg, c),
            reg_curve=lambda a, _f=fit.reg_curve: np.asarray(_f(a)) + c,
        )
        shifted = estimate_curve(shifted_data, shifted_fit, grid, spec, "dr")
        np.testing.assert_allclose(shifted.estimates, base.estimates + c, atol=1e-10)

    def test_grid_outside_support_rejected(self, bundle):
        data, fit, _ = bundle
        with pytest.raises(DomainError):
            estimate_curve(data, fit, np.array([1.0, 25.0]), KernelSpec(), "dr")

    def test_singular_points_reported(self):
        rng = np.random.default_rng(23)
        n = 90
        a = np.concatenate([rng.uniform(1, 4, n - 1), [9.5]])
        y = (rng.uniform(size=n) < 0.5).astype(float)
        data = Dataset(rng.normal(size=(n, 1)), a, y, (0.0, 10.0))
        dens = fit_treatment_density_beta(data, FeatureMap(("1", "l1")), total=10.0)
        mu = fit_outcome_regression(data, FeatureMap(("1", "l1")), link="logistic")
        fit = marginalize(data, dens, mu)
        grid = np.array([2.0, 6.5])
        curve = estimate_curve(data, fit, grid, KernelSpec("epanechnikov", 0.8), "dr")
        assert curve.failed_points == (1,)
        assert np.isnan(curve.estimates[1]) and np.isfinite(curve.estimates[0])


class TestWaldCI:
    def test_normal_quantiles(self, bundle):
        data, fit, grid = bundle
        spec = KernelSpec("epanechnikov", 1.5)
        curve = estimate_curve(data, fit, grid, spec, "dr")
        ci95 = add_wald_ci(curve, data, fit, spec, level=0.95)
        ci90 = add_wald_ci(curve, data, fit, spec, level=0.90)
        j = 10
        mult95 = (ci95.ci_high[j] - ci95.estimates[j]) / ci95.stderr[j]
        mult90 = (ci90.ci_high[j] - ci90.estimates[j]) / ci90.stderr[j]
        assert mult95 == pytest.approx(1.96, abs=5e-3)
        assert mult90 == pytest.approx(1.645, abs=5e-3)

    @pytest.mark.parametrize("method", ["influence", "residual"])
    def test_stderr_positive_and_brackets(self, bundle, method):
        data, fit, grid = bundle
        spec = KernelSpec("epanechnikov", 1.5)
        curve = estimate_curve(data, fit, grid, spec, "dr")
        out = add_wald_ci(curve, data, fit, spec, method=method)
        assert np.all(out.stderr[np.isfinite(out.stderr)] > 0)
        finite = np.isfinite(out.estimates)
        assert np.all(out.ci_low[finite] <= out.estimates[finite])
        assert np.all(out.estimates[finite] <= out.ci_high[finite])
        assert out.variance_method == method

    def test_reg_curve_rejected(self, bundle):
        data, fit, grid = bundle
        curve = estimate_curve(data, fit, grid, None, "reg")
        with pytest.raises(ValueError):
            add_wald_ci(curve, data, fit, KernelSpec("epanechnikov", 1.5))

    def test_bandwidth_mismatch_rejected(self, bundle):
        data, fit, grid = bundle
        curve = estimate_curve(data, fit, grid, KernelSpec("epanechnikov", 1.5), "dr")
        with pytest.raises(ValueError):
            add_wald_ci(curve, data, fit, KernelSpec("epanechnikov", 2.5))


class TestSmoothedTarget:
    def test_linear_curve_exact(self):
        spec = KernelSpec("epanechnikov", 0.8)
        target = smoothed_target(
            5.0, spec, lambda t: 1.0 + 2.0 * np.asarray(t), lambda t: np.ones_like(np.asarray(t))
        )
        assert target == pytest.approx(11.0, abs=1e-12)

    def test_symmetric_curve_even_moment(self):
        # Quadratic centered at the evaluation point under a uniform weight:
        # the slope picks up nothing (odd moments vanish), so the projection
        # equals the kernel-weighted mean h^2 nu2.
        h = 0.7
        spec = KernelSpec("epanechnikov", h)
        nu2, _ = kernel_moments(spec)
        target = smoothed_target(
            2.0,
            spec,
            lambda t: (np.asarray(t) - 2.0) ** 2,
            lambda t: np.ones_like(np.asarray(t)),
        )
        assert target == pytest.approx(h * h * nu2, abs=1e-10)

    def test_small_h_bias_expansion(self, truth):
        # As h shrinks, the projection bias approaches the usual curvature
        # times h^2/2 times the kernel's second moment.
        a, h = 8.0, 0.05
        spec = KernelSpec("epanechnikov", h)
        nu2, _ = kernel_moments(spec)
        target = smoothed_target(a, spec, truth.theta, truth.varpi, support=(0.0, 20.0))
        lead = float(truth.theta_d2(a)) * h * h / 2.0 * nu2
        ratio = (target - float(truth.theta(a))) / lead
        assert ratio == pytest.approx(1.0, abs=0.10)


class TestSerialization:
    def test_csv_round_trip(self, bundle, tmp_path):
        data, fit, grid = bundle
        spec = KernelSpec("epanechnikov", 1.5)
        curve = add_wald_ci(
            estimate_curve(data, fit, grid, spec, "dr"), data, fit, spec
        )
        path = tmp_path / "curve.csv"
        curve.to_csv(path)
        back = read_curve_csv(path)
        np.testing.assert_allclose(back["a"], curve.grid, rtol=0, atol=0)
        np.testing.assert_allclose(back["estimate"], curve.estimates, rtol=0, atol=0)
        np.testing.assert_allclose(back["stderr"], curve.stderr, rtol=0, atol=0)

    def test_json_metadata(self, bundle, tmp_path):
        import json

        data, fit, grid = bundle
        spec = KernelSpec("epanechnikov", 1.5)
        curve = add_wald_ci(
            estimate_curve(data, fit, grid, spec, "dr"), data, fit, spec
        )
        path = tmp_path / "curve.json"
        curve.to_json(path)
        payload = json.loads(path.read_text())
        assert payload["kind"] == "dr"
        assert payload["bandwidth"] == 1.5
        assert payload["kernel"] == "epanechnikov"
        assert payload["variance_method"] == "influence"
        assert payload["floored_count"] == curve.floored_count
        assert "smoothed parameter" in payload["ci_target"]

    def test_curve_validation(self):
        with pytest.raises(ValueError):
            EffectCurve(
                grid=np.array([1.0, 0.5]), estimates=np.zeros(2), kind="dr", kernel="x"
            )
        with pytest.raises(ValueError):
            EffectCurve(
                grid=np.array([0.5, 1.0]),
                estimates=np.zeros(2),
                kind="dr",
                kernel="epanechnikov",
                ci_low=np.array([0.5, 0.5]),
                ci_high=np.array([1.0, 1.0]),
            )


class TestCurveAccuracyAtScale:
    def test_max_error_small_at_ten_thousand(self, truth):
        # Large-sample check against the Monte Carlo truth at a fixed
        # moderate bandwidth; the 0.05 bound comes from a pilot run of
        # the oracle comparison, not from any reported value.
        data = sim.generate_data(10_000, 2024)
        fit = sim.fit_nuisances(data)
        lo, hi = truth.trimmed_support(0.20)
        grid = np.linspace(lo, hi, 101)
        curve = estimate_curve(data, fit, grid, KernelSpec("epanechnikov", 1.0), "dr")
        assert not curve.failed_points
        err = np.max(np.abs(curve.estimates - truth.theta(grid)))
        assert err < 0.05


class TestConvergenceAcrossSampleSizes:
    def test_pointwise_error_shrinks(self, truth):
        # Cheap companion to the full rate check: quadrupling n should
        # clearly shrink the error at the centre of the support.
        h_for = {400: 8.0 * 400**-0.2, 3200: 8.0 * 3200**-0.2}
        rmse = {}
        for n, h in h_for.items():
            out = sim.pointwise_rmse_study(
                n=n, replications=40, h=h, a=8.0, base_seed=505, jobs=1
            )
            rmse[n] = out["rmse"]
        assert rmse[3200] < rmse[400]
