"""Built-in simulation study.

Implements the synthetic data-generating process used throughout the test
bench: four standard-normal covariates, a beta-distributed treatment on
(0, 20) whose conditional mean is logistic in the covariates, and a
Bernoulli outcome whose success probability is logistic in the covariates,
the treatment, treatment-covariate interactions and a cubic treatment
term.  The module provides the generator, Monte Carlo oracles for the true
effect curve and marginal treatment density, deliberately misspecified
model designs, a replication harness producing integrated bias/RMSE
tables, and asymptotic bias/variance diagnostics.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.stats import norm

from .bandwidth import BandwidthSearch, _minimize, oracle_risk, select_bandwidth
from .exceptions import DRCurveError
from .estimator import smoothed_target
from .kernels import KernelSpec, kernel_moments, local_linear_fit, pointwise_fit
from .nuisance import (
    BetaConditionalDensity,
    Dataset,
    EmpiricalMarginal,
    FeatureMap,
    LinkRegression,
    NuisanceFit,
    ZeroOutcome,
    fit_outcome_regression,
    fit_treatment_density_beta,
    kang_schafer,
    marginalize,
)
from .pseudo import PseudoOutcomes, compute_pseudo, influence_values, influence_variance

TREATMENT_TOTAL = 20.0
TREATMENT_MEAN_COEF = np.array([-0.8, 0.1, 0.1, -0.1, 0.2])
OUTCOME_COEF = np.array([1.0, 0.2, 0.2, 0.3, -0.1, 0.1, -0.1, 0.1, -(0.13**3)])

TRUTH_SEED = 776_001
TRUTH_DRAWS = 1_000_000
TRUTH_GRID_SIZE = 101
_TRUTH_CHUNK = 65_536

DEFAULT_BANDWIDTH_RANGE = (0.01, 50.0)


class StudyError(DRCurveError):
    """The replication harness failed (too many failed replications)."""


def correct_treatment_design() -> FeatureMap:
    return FeatureMap(("1", "l1", "l2", "l3", "l4"))


def misspecified_treatment_design() -> FeatureMap:
    return FeatureMap(("1", "l1", "l2", "l3", "l4"), transform="kang_schafer")


def correct_outcome_design() -> FeatureMap:
    return FeatureMap(("1", "l1", "l2", "l3", "l4", "a", "a*l1", "a*l3", "a^3"))


def misspecified_outcome_design() -> FeatureMap:
    # Drops the cubic treatment term but keeps the treatment-covariate
    # interactions, on transformed covariates.
    return FeatureMap(
        ("1", "l1", "l2", "l3", "l4", "a", "a*l1", "a*l3"), transform="kang_schafer"
    )


def true_treatment_density() -> BetaConditionalDensity:
    """The generating conditional treatment density."""
    return BetaConditionalDensity(
        mean_map=correct_treatment_design(),
        coef=TREATMENT_MEAN_COEF,
        total=TREATMENT_TOTAL,
        scale=TREATMENT_TOTAL,
    )


def true_outcome_regression() -> LinkRegression:
    """The generating outcome regression."""
    return LinkRegression(correct_outcome_design(), OUTCOME_COEF, link="logistic")


def misspecify_covariates(rows):
    """Apply the fixed nonlinear covariate transforms used for model
    misspecification (sourced from Kang & Schafer 2007)."""
    rows = np.asarray(rows, dtype=float)
    single = rows.ndim == 1
    out = kang_schafer(np.atleast_2d(rows))
    return out[0] if single else out


def generate_data(n: int, seed: int) -> Dataset:
    """Draw a synthetic dataset of size n, deterministic given the seed."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    covariates = rng.standard_normal((n, 4))
    lam = true_treatment_density().mean(covariates)
    frac = rng.beta(lam, TREATMENT_TOTAL - lam)
    frac = np.clip(frac, 1e-12, 1.0 - 1e-12)
    treatment = TREATMENT_TOTAL * frac
    mu = true_outcome_regression().rowwise(covariates, treatment)
    outcome = rng.binomial(1, mu).astype(float)
    return Dataset(
        covariates=covariates,
        treatment=treatment,
        outcome=outcome,
        support=(0.0, TREATMENT_TOTAL),
    )


def _covariate_draws(seed: int, n_draws: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((n_draws, 4))


def true_theta(a, n_draws: int = TRUTH_DRAWS, seed: int = TRUTH_SEED, return_se: bool = False):
    """Monte Carlo oracle for the true effect curve.

    Averages the generating outcome regression over a fixed-seed bank of
    covariate draws shared across all evaluation points, so the resulting
    curve is smooth in a.
    """
    a_arr = np.asarray(a, dtype=float)
    avec = np.atleast_1d(a_arr)
    mu_model = true_outcome_regression()
    total = np.zeros(avec.shape[0])
    total_sq = np.zeros(avec.shape[0])
    rng = np.random.default_rng(seed)
    done = 0
    while done < n_draws:
        chunk = min(_TRUTH_CHUNK, n_draws - done)
        draws = rng.standard_normal((chunk, 4))
        vals = mu_model.grid(draws, avec)
        total += vals.sum(axis=0)
        total_sq += (vals * vals).sum(axis=0)
        done += chunk
    mean = total / n_draws
    if not return_se:
        return float(mean[0]) if a_arr.ndim == 0 else mean
    var = total_sq / n_draws - mean * mean
    se = np.sqrt(np.maximum(var, 0.0) / n_draws)
    if a_arr.ndim == 0:
        return float(mean[0]), float(se[0])
    return mean, se


def true_varpi(a, n_draws: int = TRUTH_DRAWS, seed: int = TRUTH_SEED, return_se: bool = False):
    """Monte Carlo oracle for the true marginal treatment density."""
    a_arr = np.asarray(a, dtype=float)
    avec = np.atleast_1d(a_arr)
    density = true_treatment_density()
    total = np.zeros(avec.shape[0])
    total_sq = np.zeros(avec.shape[0])
    rng = np.random.default_rng(seed)
    done = 0
    while done < n_draws:
        chunk = min(_TRUTH_CHUNK, n_draws - done)
        draws = rng.standard_normal((chunk, 4))
        vals = density.grid(draws, avec)
        total += vals.sum(axis=0)
        total_sq += (vals * vals).sum(axis=0)
        done += chunk
    mean = total / n_draws
    if not return_se:
        return float(mean[0]) if a_arr.ndim == 0 else mean
    var = total_sq / n_draws - mean * mean
    se = np.sqrt(np.maximum(var, 0.0) / n_draws)
    if a_arr.ndim == 0:
        return float(mean[0]), float(se[0])
    return mean, se


@dataclass
class TruthCurves:
    """Cached Monte Carlo truth, interpolated cubically between grid points."""

    grid: np.ndarray
    theta_values: np.ndarray
    varpi_values: np.ndarray
    theta_se: np.ndarray
    varpi_se: np.ndarray

    def __post_init__(self) -> None:
        self._theta_spline = CubicSpline(self.grid, self.theta_values)
        self._varpi_spline = CubicSpline(self.grid, self.varpi_values)

    def theta(self, a):
        return self._theta_spline(np.asarray(a, dtype=float))

    def varpi(self, a):
        return np.maximum(self._varpi_spline(np.asarray(a, dtype=float)), 0.0)

    def theta_d2(self, a):
        """Second derivative of the interpolated effect curve."""
        return self._theta_spline(np.asarray(a, dtype=float), nu=2)

    def trimmed_support(self, trim_fraction: float = 0.10) -> tuple[float, float]:
        """Interval holding all but trim_fraction of the treatment mass,
        split equally between the tails."""
        if not 0.0 <= trim_fraction < 1.0:
            raise ValueError("trim_fraction must lie in [0, 1)")
        fine = np.linspace(self.grid[0], self.grid[-1], 4001)
        dens = self.varpi(fine)
        cdf = np.concatenate([[0.0], np.cumsum((dens[1:] + dens[:-1]) / 2.0 * np.diff(fine))])
        cdf /= cdf[-1]
        half = trim_fraction / 2.0
        lo = float(np.interp(half, cdf, fine))
        hi = float(np.interp(1.0 - half, cdf, fine))
        return lo, hi


@lru_cache(maxsize=4)
def truth_curves(
    seed: int = TRUTH_SEED,
    n_draws: int = TRUTH_DRAWS,
    grid_size: int = TRUTH_GRID_SIZE,
) -> TruthCurves:
    """Build (and cache) the Monte Carlo truth artifacts on a fixed grid."""
    grid = np.linspace(0.05, TREATMENT_TOTAL - 0.05, grid_size)
    theta, theta_se = true_theta(grid, n_draws=n_draws, seed=seed, return_se=True)
    varpi, varpi_se = true_varpi(grid, n_draws=n_draws, seed=seed, return_se=True)
    return TruthCurves(
        grid=grid,
        theta_values=theta,
        varpi_values=varpi,
        theta_se=theta_se,
        varpi_se=varpi_se,
    )


@dataclass(frozen=True)
class ConstantOutcome:
    """A fixed (wrong) outcome regression limit, handy for robustness checks."""

    value: float

    def rowwise(self, rows, a) -> np.ndarray:
        k = np.atleast_2d(rows).shape[0]
        return np.full(k, self.value)

    def grid(self, rows, a) -> np.ndarray:
        k = np.atleast_2d(rows).shape[0]
        return np.full((k, np.atleast_1d(a).shape[0]), self.value)


def constant_curve(value: float):
    def curve(a):
        a = np.asarray(a, dtype=float)
        return float(value) if a.ndim == 0 else np.full(a.shape, value)

    return curve


def wrong_treatment_density() -> BetaConditionalDensity:
    """A bounded wrong limit for the conditional treatment density: the
    beta family with the covariate coefficients zeroed out."""
    return BetaConditionalDensity(
        mean_map=FeatureMap(("1",)),
        coef=np.array([TREATMENT_MEAN_COEF[0]]),
        total=TREATMENT_TOTAL,
        scale=TREATMENT_TOTAL,
    )


def limit_nuisance_fit(
    pi_correct: bool = True,
    mu_correct: bool = True,
    curves: TruthCurves | None = None,
    wrong_mu_value: float = 0.3,
    floor: float = 1e-12,
) -> NuisanceFit:
    """A nuisance bundle built from fixed limits instead of fitted models.

    Correct components use the generating functions with Monte Carlo
    marginals; wrong components use bounded misspecified limits whose own
    marginalizations are exact, so the bundle stays internally coherent.
    """
    from .nuisance import FlooredDensity

    if curves is None:
        curves = truth_curves()
    if pi_correct:
        density = true_treatment_density()
        marginal = curves.varpi
    else:
        density = wrong_treatment_density()

        def marginal(a, _d=density):
            vals = _d.grid(np.zeros((1, 4)), np.atleast_1d(np.asarray(a, dtype=float)))[0]
            return vals if np.asarray(a).ndim else float(vals[0])

    if mu_correct:
        outcome = true_outcome_regression()
        reg_curve = curves.theta
    else:
        outcome = ConstantOutcome(wrong_mu_value)
        reg_curve = constant_curve(wrong_mu_value)

    return NuisanceFit(
        cond_density=FlooredDensity(density, floor),
        outcome_reg=outcome,
        marginal_density=marginal,
        reg_curve=reg_curve,
        density_floor=floor,
    )


def fit_nuisances(
    data: Dataset,
    treatment_model: str = "correct",
    outcome_model: str = "correct",
    floor: float | None = None,
) -> NuisanceFit:
    """Fit the study's treatment density and outcome regression models."""
    pi_design = (
        correct_treatment_design()
        if treatment_model == "correct"
        else misspecified_treatment_design()
    )
    mu_design = (
        correct_outcome_design()
        if outcome_model == "correct"
        else misspecified_outcome_design()
    )
    density = fit_treatment_density_beta(data, pi_design)
    outcome = fit_outcome_regression(data, mu_design, link="logistic")
    return marginalize(data, density, outcome, floor=floor)


# ---------------------------------------------------------------------------
# Replication harness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimConfig:
    """Configuration of one correctness cell of the simulation study."""

    n: int = 1000
    replications: int = 200
    base_seed: int = 1
    treatment_model: str = "correct"
    outcome_model: str = "correct"
    estimators: tuple[str, ...] = ("reg", "ipw", "dr")
    bandwidth_mode: str = "loo"
    trim_fraction: float = 0.20
    bandwidth_range: tuple[float, float] = DEFAULT_BANDWIDTH_RANGE
    kernel: str = "epanechnikov"
    grid_size: int = 101
    search_grid_size: int = 20
    jobs: int | None = None

    def __post_init__(self) -> None:
        if self.n < 50:
            raise ValueError("n must be at least 50")
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if not 0.0 <= self.trim_fraction < 0.5:
            raise ValueError("trim_fraction must lie in [0, 0.5)")
        for name in (self.treatment_model, self.outcome_model):
            if name not in ("correct", "misspecified"):
                raise ValueError(f"unknown model flag {name!r}")
        est = tuple(self.estimators)
        if not est or any(e not in ("reg", "ipw", "dr") for e in est):
            raise ValueError("estimators must be a nonempty subset of reg/ipw/dr")
        object.__setattr__(self, "estimators", est)
        if self.bandwidth_mode not in ("loo", "oracle", "both"):
            raise ValueError("bandwidth_mode must be loo, oracle or both")
        object.__setattr__(
            self,
            "bandwidth_range",
            (float(self.bandwidth_range[0]), float(self.bandwidth_range[1])),
        )

    @property
    def correctness_label(self) -> str:
        key = (self.treatment_model == "correct", self.outcome_model == "correct")
        return {
            (True, True): "Both",
            (True, False): "Treatment",
            (False, True): "Outcome",
            (False, False): "Neither",
        }[key]

    @property
    def modes(self) -> tuple[str, ...]:
        return ("loo", "oracle") if self.bandwidth_mode == "both" else (self.bandwidth_mode,)

    def to_config(self) -> dict:
        cfg = asdict(self)
        cfg["estimators"] = list(self.estimators)
        cfg["bandwidth_range"] = list(self.bandwidth_range)
        return cfg

    @classmethod
    def from_config(cls, cfg: dict) -> "SimConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(cfg) - known
        if extra:
            raise ValueError(f"unknown simulation config keys: {sorted(extra)}")
        kwargs = dict(cfg)
        if "estimators" in kwargs:
            kwargs["estimators"] = tuple(kwargs["estimators"])
        if "bandwidth_range" in kwargs:
            kwargs["bandwidth_range"] = tuple(kwargs["bandwidth_range"])
        return cls(**kwargs)


@dataclass(frozen=True)
class CellResult:
    """Integrated metrics for one (estimator, bandwidth mode) pair."""

    estimator: str
    bandwidth_mode: str
    integrated_bias: float
    integrated_rmse: float
    bias_se: float
    rmse_se: float
    h_mean: float = math.nan
    h_min: float = math.nan
    h_max: float = math.nan


@dataclass(frozen=True)
class SimulationReport:
    """Study output: one row per configured estimator/bandwidth pair."""

    config: dict
    correctness: str
    cells: tuple[CellResult, ...]
    n_used: int
    n_failed: int
    failed_indices: tuple[int, ...] = ()

    def cell(self, estimator: str, bandwidth_mode: str | None = None) -> CellResult:
        for c in self.cells:
            if c.estimator == estimator and (
                bandwidth_mode is None or c.bandwidth_mode == bandwidth_mode
            ):
                return c
        raise KeyError(f"no cell for {estimator!r}/{bandwidth_mode!r}")

    def to_csv(self, path) -> None:
        import csv as _csv

        with open(path, "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(
                [
                    "estimator",
                    "bandwidth_mode",
                    "correct_model",
                    "bias",
                    "bias_se",
                    "rmse",
                    "rmse_se",
                    "h_mean",
                    "h_min",
                    "h_max",
                    "n_used",
                ]
            )
            for c in self.cells:
                writer.writerow(
                    [
                        c.estimator,
                        c.bandwidth_mode,
                        self.correctness,
                        repr(c.integrated_bias),
                        repr(c.bias_se),
                        repr(c.integrated_rmse),
                        repr(c.rmse_se),
                        repr(c.h_mean),
                        repr(c.h_min),
                        repr(c.h_max),
                        self.n_used,
                    ]
                )

    def to_json(self, path) -> None:
        import json as _json

        payload = {
            "schema": 1,
            "config": self.config,
            "correctness": self.correctness,
            "n_used": self.n_used,
            "n_failed": self.n_failed,
            "failed_indices": list(self.failed_indices),
            "cells": [asdict(c) for c in self.cells],
        }
        with open(path, "w") as fh:
            _json.dump(payload, fh, sort_keys=True, indent=2)
            fh.write("\n")


def default_jobs() -> int:
    env = os.environ.get("DRCURVE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def _parallel_map(fn, tasks, jobs: int | None):
    jobs = default_jobs() if jobs is None else max(1, int(jobs))
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    chunksize = max(1, len(tasks) // (jobs * 8))
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks, chunksize=chunksize))


def _pseudo_values_by_kind(data: Dataset, fit: NuisanceFit, kinds) -> dict:
    """Pseudo-outcomes for the requested estimator kinds in one pass.

    The expensive pieces (the floored conditional density at the
    observations and its empirical marginal) are shared between the
    doubly robust and inverse-weighted variants.
    """
    raw = np.asarray(fit.cond_density.raw.rowwise(data.covariates, data.treatment))
    floored = int(np.count_nonzero(raw < fit.density_floor))
    ratio = np.asarray(fit.marginal_density(data.treatment)) / np.maximum(
        raw, fit.density_floor
    )
    out = {}
    if "ipw" in kinds:
        out["ipw"] = PseudoOutcomes(data.outcome * ratio, floored)
    if "dr" in kinds:
        mu = np.asarray(fit.outcome_reg.rowwise(data.covariates, data.treatment))
        m_curve = np.asarray(fit.reg_curve(data.treatment))
        out["dr"] = PseudoOutcomes((data.outcome - mu) * ratio + m_curve, floored)
    return out


def _study_task(args):
    """One replication: generate, fit, select bandwidths, evaluate curves."""
    cfg_dict, curves, grid, index = args
    cfg = SimConfig.from_config(cfg_dict)
    try:
        data = generate_data(cfg.n, cfg.base_seed + index)
        out: dict = {"index": index, "curves": {}, "h": {}}
        smoothing_kinds = [e for e in cfg.estimators if e != "reg"]
        needs_mu = any(e in cfg.estimators for e in ("reg", "dr"))
        mu_design = (
            correct_outcome_design()
            if cfg.outcome_model == "correct"
            else misspecified_outcome_design()
        )
        outcome = (
            fit_outcome_regression(data, mu_design, link="logistic")
            if needs_mu
            else ZeroOutcome()
        )
        if "reg" in cfg.estimators:
            out["curves"][("reg", "none")] = EmpiricalMarginal(outcome, data.covariates)(grid)
        if smoothing_kinds:
            pi_design = (
                correct_treatment_design()
                if cfg.treatment_model == "correct"
                else misspecified_treatment_design()
            )
            density = fit_treatment_density_beta(data, pi_design)
            fit = marginalize(data, density, outcome)
            pseudo_by_kind = _pseudo_values_by_kind(data, fit, smoothing_kinds)
            search = BandwidthSearch(
                h_min=cfg.bandwidth_range[0],
                h_max=cfg.bandwidth_range[1],
                grid_size=cfg.search_grid_size,
            )
            for est in smoothing_kinds:
                pseudo = pseudo_by_kind[est]
                for mode in cfg.modes:
                    if mode == "loo":
                        sel = select_bandwidth(
                            data.treatment, pseudo, cfg.kernel, search
                        )
                    else:
                        sel = _minimize(
                            lambda h: oracle_risk(
                                h, data.treatment, curves.theta, pseudo, cfg.kernel
                            ),
                            search,
                        )
                    if not math.isfinite(sel.risk_at_selected):
                        raise StudyError(f"no feasible bandwidth for {est}/{mode}")
                    spec = KernelSpec(cfg.kernel, sel.selected)
                    vals, _, ok = pointwise_fit(
                        data.treatment, pseudo.values, spec, points=grid
                    )
                    if not ok.all():
                        raise StudyError(f"singular grid point for {est}/{mode}")
                    out["curves"][(est, mode)] = vals
                    out["h"][(est, mode)] = sel.selected
        return out
    except DRCurveError as exc:
        return {"index": index, "error": f"{type(exc).__name__}: {exc}"}


def run_study(config: SimConfig, progress=None) -> SimulationReport:
    """Run the replication study for one correctness cell.

    Per replication (seed = base_seed + index): generate data, fit the
    configured nuisance models, select bandwidths and evaluate every
    configured estimator on a common grid over the trimmed treatment
    support.  Integrated absolute mean bias and root mean squared error
    are computed against the Monte Carlo truth, integrated with the true
    marginal density as the weight (trapezoid rule over the trimmed
    support, no renormalization), and scaled by 100.
    ``progress(done, total)`` is called after every batch of replications.
    """
    curves = truth_curves()
    lo, hi = curves.trimmed_support(config.trim_fraction)
    grid = np.linspace(lo, hi, config.grid_size)
    theta_grid = curves.theta(grid)
    dens = curves.varpi(grid)
    trap = np.full(grid.shape[0], 1.0)
    trap[0] = trap[-1] = 0.5
    weights = trap * dens * (grid[1] - grid[0])

    curves_arg = curves if "oracle" in config.modes else None
    tasks = [
        (config.to_config(), curves_arg, grid, idx)
        for idx in range(config.replications)
    ]
    results = []
    batch = 50 if progress else len(tasks)
    for start in range(0, len(tasks), max(batch, 1)):
        results.extend(_parallel_map(_study_task, tasks[start : start + batch], config.jobs))
        if progress:
            progress(len(results), len(tasks))

    failed = tuple(r["index"] for r in results if "error" in r)
    good = [r for r in results if "error" not in r]
    if config.replications > 0 and len(failed) / config.replications >= 0.02:
        detail = "; ".join(
            r["error"] for r in results if "error" in r
        )
        raise StudyError(
            f"{len(failed)}/{config.replications} replications failed: {detail}"
        )

    keys = [("reg", "none")] if "reg" in config.estimators else []
    for est in config.estimators:
        if est == "reg":
            continue
        keys.extend((est, mode) for mode in config.modes)

    rng = np.random.default_rng(config.base_seed + 90_210)
    boot = rng.integers(0, len(good), size=(200, len(good)))

    cells = []
    for key in keys:
        errs = np.stack([r["curves"][key] for r in good]) - theta_grid[None, :]
        bias = 100.0 * float(weights @ np.abs(errs.mean(axis=0)))
        rmse = 100.0 * float(weights @ np.sqrt((errs**2).mean(axis=0)))
        bias_draws = np.empty(boot.shape[0])
        rmse_draws = np.empty(boot.shape[0])
        for b in range(boot.shape[0]):
            sample = errs[boot[b]]
            bias_draws[b] = 100.0 * float(weights @ np.abs(sample.mean(axis=0)))
            rmse_draws[b] = 100.0 * float(weights @ np.sqrt((sample**2).mean(axis=0)))
        hs = [r["h"].get(key) for r in good if key in r["h"]]
        cells.append(
            CellResult(
                estimator=key[0],
                bandwidth_mode=key[1],
                integrated_bias=bias,
                integrated_rmse=rmse,
                bias_se=float(bias_draws.std(ddof=1)),
                rmse_se=float(rmse_draws.std(ddof=1)),
                h_mean=float(np.mean(hs)) if hs else math.nan,
                h_min=float(np.min(hs)) if hs else math.nan,
                h_max=float(np.max(hs)) if hs else math.nan,
            )
        )
    return SimulationReport(
        config=config.to_config(),
        correctness=config.correctness_label,
        cells=tuple(cells),
        n_used=len(good),
        n_failed=len(failed),
        failed_indices=failed,
    )


# ---------------------------------------------------------------------------
# Asymptotic diagnostics
# ---------------------------------------------------------------------------


def asymptotic_bias_variance(
    a: float,
    h: float,
    kernel_family: str = "epanechnikov",
    pi_limit=None,
    varpi_limit=None,
    mu_limit=None,
    m_limit=None,
    n_draws: int = 200_000,
    seed: int = TRUTH_SEED + 5,
) -> tuple[float, float]:
    """Asymptotic smoothing bias and local variance of the estimator.

    Returns (b_h(a), sigma2(a)) where the bias is half the curvature of
    the Monte Carlo effect curve times h^2 times the kernel's second
    moment, and the variance is the conditional variance of the limiting
    pseudo-outcome given A = a, evaluated by Monte Carlo over covariates.
    ``None`` limits default to the generating truth.
    """
    curves = truth_curves()
    nu2, _ = kernel_moments(KernelSpec(kernel_family, h))
    bias = float(curves.theta_d2(a)) * (h**2 / 2.0) * nu2

    draws = _covariate_draws(seed, n_draws)
    mu_true = true_outcome_regression().rowwise(draws, a)
    tau_sq = mu_true * (1.0 - mu_true)
    pi_true = true_treatment_density().rowwise(draws, a)
    varpi_true = float(curves.varpi(a))
    theta = float(curves.theta(a))

    pi_bar = pi_true if pi_limit is None else np.asarray(pi_limit.rowwise(draws, a))
    varpi_bar = varpi_true if varpi_limit is None else float(varpi_limit(a))
    mu_bar = mu_true if mu_limit is None else np.asarray(mu_limit.rowwise(draws, a))
    m_bar = theta if m_limit is None else float(m_limit(a))

    denom = (pi_bar / varpi_bar) ** 2 / (pi_true / varpi_true)
    sigma2 = float(np.mean((tau_sq + (mu_true - mu_bar) ** 2) / denom)) - (
        theta - m_bar
    ) ** 2
    return bias, sigma2


def _curve_point_task(args):
    """One replication of the fixed-bandwidth fit at a single center."""
    (
        n,
        seed,
        a,
        h,
        kernel,
        treatment_model,
        outcome_model,
        want_ci,
    ) = args
    try:
        data = generate_data(n, seed)
        fit = fit_nuisances(data, treatment_model, outcome_model)
        pseudo = compute_pseudo(data, fit)
        spec = KernelSpec(kernel, h)
        beta = local_linear_fit(data.treatment, pseudo.values, a, spec)
        if not want_ci:
            return {"estimate": beta[0]}
        iv = influence_values(data, fit, a, spec, np.asarray(beta))
        stderr = math.sqrt(influence_variance(iv) / data.n)
        return {"estimate": beta[0], "stderr": stderr}
    except DRCurveError as exc:
        return {"error": f"{type(exc).__name__}: {exc}"}


def coverage_study(
    n: int,
    replications: int,
    h: float,
    a: float = 8.0,
    base_seed: int = 7_000,
    level: float = 0.95,
    kernel: str = "epanechnikov",
    treatment_model: str = "correct",
    outcome_model: str = "correct",
    jobs: int | None = None,
) -> dict:
    """Empirical coverage of the Wald interval for the smoothed parameter.

    The target is the fixed-bandwidth projection of the Monte Carlo truth
    under the true marginal density.
    """
    curves = truth_curves()
    spec = KernelSpec(kernel, h)
    target = smoothed_target(
        a, spec, curves.theta, curves.varpi, support=(0.0, TREATMENT_TOTAL)
    )
    tasks = [
        (n, base_seed + i, a, h, kernel, treatment_model, outcome_model, True)
        for i in range(replications)
    ]
    results = _parallel_map(_curve_point_task, tasks, jobs)
    good = [r for r in results if "error" not in r]
    if len(good) < 0.98 * replications:
        raise StudyError(f"{replications - len(good)} coverage replications failed")
    estimates = np.array([r["estimate"] for r in good])
    stderrs = np.array([r["stderr"] for r in good])
    z = float(norm.ppf(0.5 * (1.0 + level)))
    covered = np.abs(estimates - target) <= z * stderrs
    return {
        "coverage": float(covered.mean()),
        "target": target,
        "estimates": estimates,
        "stderrs": stderrs,
        "n_used": len(good),
    }


def pointwise_rmse_study(
    n: int,
    replications: int,
    h: float,
    a: float = 8.0,
    base_seed: int = 9_000,
    kernel: str = "epanechnikov",
    jobs: int | None = None,
) -> dict:
    """Root mean squared error of the doubly robust fit at one center,
    with correctly specified nuisance models and a fixed bandwidth."""
    curves = truth_curves()
    theta = float(curves.theta(a))
    tasks = [
        (n, base_seed + i, a, h, kernel, "correct", "correct", False)
        for i in range(replications)
    ]
    results = _parallel_map(_curve_point_task, tasks, jobs)
    good = [r for r in results if "error" not in r]
    if len(good) < 0.98 * replications:
        raise StudyError(f"{replications - len(good)} replications failed")
    estimates = np.array([r["estimate"] for r in good])
    rmse = float(np.sqrt(np.mean((estimates - theta) ** 2)))
    return {"rmse": rmse, "estimates": estimates, "truth": theta, "n_used": len(good)}
