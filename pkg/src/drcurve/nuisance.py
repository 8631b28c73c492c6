"""Nuisance function estimation.

Fits the conditional treatment density and the outcome regression, and
bundles them with their empirical marginalizations: the marginal treatment
density (average of the conditional density over the training covariate
rows) and the regression-marginalized curve (average of the outcome
regression over the same rows).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.special import betaln, expit
from scipy.stats import gaussian_kde

from .exceptions import DegenerateScale, DomainError, NoConvergence, RankDeficient

_IRLS_MAX_ITER = 100
_IRLS_GRAD_TOL = 1e-11
_MIN_SCALE = 1e-8
_KDE_GRID_SIZE = 4096
_MARGINAL_BLOCK = 4_000_000  # max elements per evaluation block


@dataclass(frozen=True)
class Dataset:
    """An i.i.d. sample of (covariate row, treatment, outcome) triples."""

    covariates: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    support: tuple[float, float]

    def __post_init__(self) -> None:
        cov = np.atleast_2d(np.asarray(self.covariates, dtype=float))
        trt = np.asarray(self.treatment, dtype=float)
        out = np.asarray(self.outcome, dtype=float)
        if cov.shape[0] != trt.shape[0] or trt.shape[0] != out.shape[0]:
            raise ValueError("covariates, treatment and outcome must share n")
        if trt.shape[0] < 2:
            raise ValueError("need at least 2 observations")
        for name, arr in (("covariates", cov), ("treatment", trt), ("outcome", out)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        lo, hi = float(self.support[0]), float(self.support[1])
        if not lo < hi:
            raise ValueError("support must be a nondegenerate interval")
        if trt.min() < lo or trt.max() > hi:
            raise DomainError("treatment values fall outside the declared support")
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "treatment", trt)
        object.__setattr__(self, "outcome", out)
        object.__setattr__(self, "support", (lo, hi))

    @property
    def n(self) -> int:
        return self.treatment.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]


def kang_schafer(rows: np.ndarray) -> np.ndarray:
    """The four nonlinear covariate transforms of Kang & Schafer (2007).

    Applied to the first four columns; any further columns pass through.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.shape[1] < 4:
        raise ValueError("kang_schafer transform needs at least 4 covariates")
    l1, l2, l3, l4 = rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3]
    out = rows.copy()
    out[:, 0] = np.exp(l1 / 2.0)
    out[:, 1] = l2 / (1.0 + np.exp(l1)) + 10.0
    out[:, 2] = (l1 * l3 / 25.0 + 0.6) ** 3
    out[:, 3] = (l2 + l4 + 20.0) ** 2
    return out


TRANSFORMS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "identity": lambda rows: np.atleast_2d(np.asarray(rows, dtype=float)),
    "kang_schafer": kang_schafer,
}

_TERM_RE = re.compile(r"^(?:1|a(?:\^(\d+))?|l(\d+))$")


def _parse_term(term: str) -> tuple[int, tuple[int, ...]]:
    """Parse a term like '1', 'a', 'a^3', 'l2' or 'a*l1' into
    (a_power, covariate indices)."""
    a_power = 0
    l_idx: list[int] = []
    for token in term.replace(" ", "").split("*"):
        m = _TERM_RE.match(token)
        if m is None:
            raise ValueError(f"cannot parse feature term {term!r}")
        if token == "1":
            continue
        if token.startswith("a"):
            a_power += int(m.group(1) or 1)
        else:
            l_idx.append(int(m.group(2)) - 1)
    return a_power, tuple(l_idx)


@dataclass(frozen=True)
class FeatureMap:
    """Declarative design specification built from small string terms.

    Each term multiplies a power of the treatment with covariates, e.g.
    ``"1"``, ``"l2"``, ``"a"``, ``"a^3"``, ``"a*l1"``.  Covariate rows are
    passed through the named transform before any term is evaluated, which
    is how deliberately misspecified designs are expressed.
    """

    terms: tuple[str, ...]
    transform: str = "identity"
    _parsed: tuple[tuple[int, tuple[int, ...]], ...] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if isinstance(self.terms, str):
            raise TypeError("terms must be a sequence of strings")
        object.__setattr__(self, "terms", tuple(self.terms))
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}")
        object.__setattr__(self, "_parsed", tuple(_parse_term(t) for t in self.terms))

    @property
    def width(self) -> int:
        return len(self.terms)

    @property
    def max_a_power(self) -> int:
        return max((p for p, _ in self._parsed), default=0)

    def transformed(self, rows: np.ndarray) -> np.ndarray:
        return TRANSFORMS[self.transform](rows)

    def covariate_parts(self, rows: np.ndarray) -> np.ndarray:
        """(k, q) matrix of the covariate factor of every term."""
        rows = self.transformed(rows)
        k = rows.shape[0]
        cols = np.empty((k, self.width))
        for j, (_, l_idx) in enumerate(self._parsed):
            col = np.ones(k)
            for i in l_idx:
                if i >= rows.shape[1]:
                    raise ValueError(f"term {self.terms[j]!r} references missing covariate")
                col = col * rows[:, i]
            cols[:, j] = col
        return cols

    def treatment_parts(self, a) -> np.ndarray:
        """(m, q) matrix of the treatment factor of every term."""
        a = np.atleast_1d(np.asarray(a, dtype=float))
        return np.stack([a**p for p, _ in self._parsed], axis=1)

    def design(self, rows: np.ndarray, a) -> np.ndarray:
        """(k, q) design matrix at per-row treatment values (or a scalar)."""
        lparts = self.covariate_parts(rows)
        a = np.asarray(a, dtype=float)
        if a.ndim == 0:
            return lparts * self.treatment_parts(a)[0]
        return lparts * self.treatment_parts(a)

    def to_config(self) -> dict:
        return {"terms": list(self.terms), "transform": self.transform}

    @classmethod
    def from_config(cls, cfg: dict) -> "FeatureMap":
        return cls(tuple(cfg["terms"]), cfg.get("transform", "identity"))


# ---------------------------------------------------------------------------
# Evaluators: every conditional object exposes rowwise(L, a) -> (k,) and
# grid(L, a) -> (k, m).
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinkRegression:
    """Fitted generalized linear outcome regression."""

    feature_map: FeatureMap
    coef: np.ndarray
    link: str = "logistic"

    def _inverse_link(self, eta: np.ndarray) -> np.ndarray:
        return expit(eta) if self.link == "logistic" else eta

    def rowwise(self, rows, a) -> np.ndarray:
        return self._inverse_link(self.feature_map.design(rows, a) @ self.coef)

    def grid(self, rows, a) -> np.ndarray:
        lparts = self.feature_map.covariate_parts(rows) * self.coef
        return self._inverse_link(lparts @ self.feature_map.treatment_parts(a).T)


class ZeroOutcome:
    """Outcome regression pinned to zero (the IPW configuration)."""

    def rowwise(self, rows, a) -> np.ndarray:
        k = np.atleast_2d(rows).shape[0]
        return np.zeros(k)

    def grid(self, rows, a) -> np.ndarray:
        k = np.atleast_2d(rows).shape[0]
        return np.zeros((k, np.atleast_1d(a).shape[0]))


@dataclass(frozen=True)
class BetaConditionalDensity:
    """Beta-family conditional treatment density on (0, total).

    The treatment fraction A/total given covariates l follows a beta law
    with shapes (scale * p(l), scale * (1 - p(l))) where the mean fraction
    is p(l) = expit(x(l)' gamma); the conditional mean of A is
    lambda(l) = total * p(l).
    """

    mean_map: FeatureMap
    coef: np.ndarray
    total: float
    scale: float

    def mean(self, rows) -> np.ndarray:
        """Conditional mean lambda(l) of the treatment."""
        return self.total * self._fraction(rows)

    def _fraction(self, rows) -> np.ndarray:
        return expit(self.mean_map.design(rows, 0.0) @ self.coef)

    def _logpdf(self, frac: np.ndarray, x: np.ndarray) -> np.ndarray:
        alpha = self.scale * frac
        beta = self.scale - alpha
        with np.errstate(divide="ignore", invalid="ignore"):
            core = (
                (alpha - 1.0) * np.log(x)
                + (beta - 1.0) * np.log1p(-x)
                - betaln(alpha, beta)
                - math.log(self.total)
            )
        return core

    def rowwise(self, rows, a) -> np.ndarray:
        frac = self._fraction(rows)
        a = np.asarray(a, dtype=float)
        x = a / self.total
        inside = (x > 0.0) & (x < 1.0)
        x = np.where(inside, x, 0.5)
        out = np.exp(self._logpdf(frac, x))
        return np.where(inside, out, 0.0) + np.zeros_like(frac)

    def grid(self, rows, a) -> np.ndarray:
        frac = self._fraction(rows)[:, None]
        a = np.atleast_1d(np.asarray(a, dtype=float))[None, :]
        x = a / self.total
        inside = (x > 0.0) & (x < 1.0)
        x = np.where(inside, x, 0.5)
        return np.where(inside, np.exp(self._logpdf(frac, x)), 0.0)


@dataclass(frozen=True)
class LocScaleConditionalDensity:
    """Location-scale conditional density A = mean(l) + scale(l) * eps.

    The residual density is a Gaussian KDE of the centered standardized
    residuals, tabulated once on a fine grid and interpolated linearly.
    """

    mean_map: FeatureMap
    mean_coef: np.ndarray
    scale_map: FeatureMap
    logsq_coef: np.ndarray
    scale_factor: float
    density_x: np.ndarray
    density_f: np.ndarray
    center_shift: float
    kde_bandwidth: float
    residuals: np.ndarray

    def mean(self, rows) -> np.ndarray:
        return self.mean_map.design(rows, 0.0) @ self.mean_coef

    def scale(self, rows) -> np.ndarray:
        g = self.scale_map.design(rows, 0.0) @ self.logsq_coef
        return self.scale_factor * np.exp(0.5 * g)

    def _residual_density(self, u: np.ndarray) -> np.ndarray:
        return np.interp(u, self.density_x, self.density_f, left=0.0, right=0.0)

    def rowwise(self, rows, a) -> np.ndarray:
        lam = self.mean(rows)
        gam = np.maximum(self.scale(rows), _MIN_SCALE)
        u = (np.asarray(a, dtype=float) - lam) / gam - self.center_shift
        return self._residual_density(u) / gam

    def grid(self, rows, a) -> np.ndarray:
        lam = self.mean(rows)[:, None]
        gam = np.maximum(self.scale(rows), _MIN_SCALE)[:, None]
        a = np.atleast_1d(np.asarray(a, dtype=float))[None, :]
        u = (a - lam) / gam - self.center_shift
        return self._residual_density(u) / gam


@dataclass(frozen=True)
class FlooredDensity:
    """Conditional density clamped below at a positive floor."""

    raw: object
    floor: float

    def rowwise(self, rows, a) -> np.ndarray:
        return np.maximum(self.raw.rowwise(rows, a), self.floor)

    def grid(self, rows, a) -> np.ndarray:
        return np.maximum(self.raw.grid(rows, a), self.floor)


class EmpiricalMarginal:
    """Average of a conditional evaluator over fixed training rows."""

    def __init__(self, conditional, rows: np.ndarray):
        self.conditional = conditional
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        # With no covariates every row is the same; averaging one row is
        # identical and keeps covariate-free reductions bit-exact.
        self.rows = rows[:1] if rows.shape[1] == 0 else rows

    def __call__(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        avec = np.atleast_1d(a)
        n = self.rows.shape[0]
        chunk = max(1, _MARGINAL_BLOCK // max(n, 1))
        out = np.empty(avec.shape[0])
        for start in range(0, avec.shape[0], chunk):
            block = avec[start : start + chunk]
            out[start : start + block.shape[0]] = self.conditional.grid(
                self.rows, block
            ).mean(axis=0)
        return float(out[0]) if a.ndim == 0 else out


@dataclass(frozen=True)
class NuisanceFit:
    """The fitted nuisance quadruple used by the pseudo-outcome.

    ``cond_density`` is already floored; ``marginal_density`` and
    ``reg_curve`` are the empirical averages of the floored density and the
    outcome regression over the training covariate rows.
    """

    cond_density: FlooredDensity
    outcome_reg: object
    marginal_density: Callable
    reg_curve: Callable
    density_floor: float

    def with_zero_outcome(self) -> "NuisanceFit":
        """The IPW configuration: outcome regression identically zero."""
        zero = ZeroOutcome()

        def zero_curve(a):
            a = np.asarray(a, dtype=float)
            return 0.0 if a.ndim == 0 else np.zeros(a.shape)

        return replace(self, outcome_reg=zero, reg_curve=zero_curve)


def default_density_floor(support: tuple[float, float]) -> float:
    """Deterministic positivity floor: 0.02 divided by the support length.

    Chosen so that a grossly misspecified conditional density cannot turn a
    single observation into an inverse-weight large enough to dominate a
    whole kernel window; clamping under a correctly specified density stays
    rare (well under one observation per thousand).
    """
    return 0.02 / (support[1] - support[0])


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def _binomial_loglik(eta: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def _irls_binomial(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Newton/IRLS for (quasi-)binomial regression with logit link.

    Converges on the mean log-likelihood gradient; raises RankDeficient for
    collinear designs and NoConvergence past the iteration cap.
    """
    n, q = X.shape
    if np.linalg.matrix_rank(X) < q:
        raise RankDeficient("outcome design matrix is collinear")
    beta = np.zeros(q)
    eta = X @ beta
    loglik = _binomial_loglik(eta, y)
    for _ in range(_IRLS_MAX_ITER):
        p = expit(eta)
        grad = X.T @ (y - p) / n
        if np.max(np.abs(grad)) < _IRLS_GRAD_TOL:
            return beta
        w = np.clip(p * (1.0 - p), 1e-10, None)
        hess = (X * w[:, None]).T @ X / n
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError as exc:
            raise RankDeficient("weighted design matrix is singular") from exc
        slack = 1e-9 * (1.0 + abs(loglik))  # float noise in the n-term sum
        scale = 1.0
        while scale > 2.0**-30:
            cand = beta + scale * step
            eta_cand = X @ cand
            cand_ll = _binomial_loglik(eta_cand, y)
            if cand_ll >= loglik - slack:
                break
            scale /= 2.0
        beta, eta, loglik = cand, eta_cand, cand_ll
    raise NoConvergence(f"IRLS did not converge in {_IRLS_MAX_ITER} iterations")


def _ols(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < X.shape[1]:
        raise RankDeficient("design matrix is collinear")
    return coef


def fit_outcome_regression(
    data: Dataset, design: FeatureMap, link: str = "logistic"
) -> LinkRegression:
    """Fit the outcome regression mu(l, a) on the given design.

    ``link="logistic"`` maximizes the Bernoulli likelihood via IRLS (the
    outcome must lie in [0, 1]); ``link="identity"`` is ordinary least
    squares.
    """
    if link not in ("logistic", "identity"):
        raise ValueError(f"unknown link {link!r}")
    X = design.design(data.covariates, data.treatment)
    if link == "logistic":
        y = data.outcome
        if y.min() < 0.0 or y.max() > 1.0:
            raise DomainError("logistic link requires outcomes in [0, 1]")
        coef = _irls_binomial(X, y)
    else:
        coef = _ols(X, data.outcome)
    return LinkRegression(design, coef, link)


def fit_treatment_density_beta(
    data: Dataset,
    mean_design: FeatureMap,
    scale: float | None = None,
    total: float | None = None,
) -> BetaConditionalDensity:
    """Fit the beta-family conditional treatment density on (0, total).

    The conditional mean lambda(l) = total * expit(x(l)' gamma) is fitted
    by quasi-likelihood (IRLS with logit link) on the fractions A/total.
    With the default scale (= total) the beta shapes are
    (lambda(l), total - lambda(l)).
    """
    if mean_design.max_a_power > 0:
        raise ValueError("treatment mean design must not reference the treatment")
    total = float(data.support[1] if total is None else total)
    scale = float(total if scale is None else scale)
    frac = data.treatment / total
    if frac.min() <= 0.0 or frac.max() >= 1.0:
        raise DomainError(f"treatments must lie strictly inside (0, {total:g})")
    X = mean_design.design(data.covariates, 0.0)
    coef = _irls_binomial(X, frac)
    return BetaConditionalDensity(mean_design, coef, total=total, scale=scale)


def fit_treatment_density_locscale(
    data: Dataset, mean_design: FeatureMap, scale_design: FeatureMap
) -> LocScaleConditionalDensity:
    """Fit a location-scale conditional density with a KDE residual law.

    The conditional mean is fitted by least squares, the conditional scale
    by regressing log squared residuals (then exponentiating half), and the
    density of the centered standardized residuals by a Gaussian kernel
    density estimate with Silverman's bandwidth.
    """
    if data.n < 20:
        raise ValueError("location-scale density fit needs n >= 20")
    for fm, name in ((mean_design, "mean"), (scale_design, "scale")):
        if fm.max_a_power > 0:
            raise ValueError(f"{name} design must not reference the treatment")
    X_mean = mean_design.design(data.covariates, 0.0)
    mean_coef = _ols(X_mean, data.treatment)
    resid = data.treatment - X_mean @ mean_coef
    log_sq = np.log(np.maximum(resid**2, 1e-290))
    X_scale = scale_design.design(data.covariates, 0.0)
    logsq_coef = _ols(X_scale, log_sq)
    gamma_raw = np.exp(0.5 * (X_scale @ logsq_coef))
    if gamma_raw.min() < _MIN_SCALE:
        raise DegenerateScale("estimated conditional scale is numerically zero")
    # The log-chi-square regression recovers the scale shape only up to a
    # multiplicative constant; normalize so the standardized residuals have
    # unit variance, matching the model convention.
    eps_raw = resid / gamma_raw
    factor = float(eps_raw.std())
    if factor < _MIN_SCALE:
        raise DegenerateScale("estimated conditional scale is numerically zero")
    standardized = eps_raw / factor
    shift = float(standardized.mean())
    centered = standardized - shift
    kde = gaussian_kde(centered, bw_method="silverman")
    bw = float(kde.factor * centered.std(ddof=1))
    span = 5.0 * bw
    grid = np.linspace(centered.min() - span, centered.max() + span, _KDE_GRID_SIZE)
    dens = kde(grid)
    return LocScaleConditionalDensity(
        mean_map=mean_design,
        mean_coef=mean_coef,
        scale_map=scale_design,
        logsq_coef=logsq_coef,
        scale_factor=factor,
        density_x=grid,
        density_f=dens,
        center_shift=shift,
        kde_bandwidth=bw,
        residuals=centered,
    )


def marginalize(
    data: Dataset,
    cond_density,
    outcome_reg,
    floor: float | None = None,
) -> NuisanceFit:
    """Bundle fitted evaluators with their empirical marginalizations."""
    if floor is None:
        floor = default_density_floor(data.support)
    if not floor > 0.0:
        raise ValueError("density floor must be positive")
    floored = FlooredDensity(cond_density, float(floor))
    return NuisanceFit(
        cond_density=floored,
        outcome_reg=outcome_reg,
        marginal_density=EmpiricalMarginal(floored, data.covariates),
        reg_curve=EmpiricalMarginal(outcome_reg, data.covariates),
        density_floor=float(floor),
    )
