"""Doubly robust pseudo-outcome and influence-function values.

The pseudo-outcome is the inverse-density-weighted outcome residual plus
the regression-marginalized curve,

    xi_i = (Y_i - mu(L_i, A_i)) / (pi(A_i | L_i) / varpi(A_i)) + m(A_i),

whose conditional mean given the treatment equals the effect curve when
either the treatment density or the outcome regression limit is correct.
Regressing xi on A with a local-linear kernel smoother solves the
efficient-influence-function estimating equation for the fixed-bandwidth
projection parameter; the per-observation influence values computed here
feed the Wald variance estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import SingularDesign
from .kernels import SINGULAR_REL_TOL, KernelSpec, design_matrix, scaled_weights
from .nuisance import Dataset, NuisanceFit


@dataclass(frozen=True)
class PseudoOutcomes:
    """Per-observation pseudo-outcomes plus a count of density floor hits."""

    values: np.ndarray
    floored_count: int

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(values)):
            raise ValueError("pseudo-outcomes must be finite")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class InfluenceValues:
    """Influence-function values phi_i (n x 2) and the local design matrix."""

    phi: np.ndarray
    d_matrix: np.ndarray


def compute_pseudo(data: Dataset, fit: NuisanceFit) -> PseudoOutcomes:
    """Evaluate the pseudo-outcome at every observation.

    The conditional density is clamped at the fit's floor before dividing,
    so the values are always finite; the number of clamped observations is
    reported rather than silently absorbed.
    """
    raw = np.asarray(fit.cond_density.raw.rowwise(data.covariates, data.treatment))
    floored_count = int(np.count_nonzero(raw < fit.density_floor))
    ratio = np.asarray(fit.marginal_density(data.treatment)) / np.maximum(
        raw, fit.density_floor
    )
    mu = np.asarray(fit.outcome_reg.rowwise(data.covariates, data.treatment))
    m_curve = np.asarray(fit.reg_curve(data.treatment))
    values = (data.outcome - mu) * ratio + m_curve
    return PseudoOutcomes(values=values, floored_count=floored_count)


def _simpson_nodes(lo: float, hi: float, panels: int) -> tuple[np.ndarray, np.ndarray]:
    """Composite Simpson nodes and weights on [lo, hi] with the given panels."""
    panels = max(int(panels), 1)
    nodes = np.linspace(lo, hi, 2 * panels + 1)
    step = (hi - lo) / (2 * panels)
    weights = np.ones(nodes.shape[0])
    weights[1:-1:2] = 4.0
    weights[2:-1:2] = 2.0
    weights *= step / 3.0
    return nodes, weights


def influence_values(
    data: Dataset,
    fit: NuisanceFit,
    a: float,
    spec: KernelSpec,
    beta: np.ndarray,
    quad_points: int = 200,
    pseudo: PseudoOutcomes | None = None,
) -> InfluenceValues:
    """Influence-function values at center a for the fitted coefficients.

    Each phi_i is the solve of the local design matrix against the sum of
    the estimating-function term at observation i and a correction
    integral of g K (mu(L_i, t) - m(t)) varpi(t) over the kernel window,
    evaluated by composite Simpson quadrature with ``quad_points`` panels.
    The integral term averages to zero across observations, which is why
    point estimation never needs it, but the variance does.
    """
    h = spec.bandwidth
    d_matrix = design_matrix(data.treatment, a, spec)
    det = d_matrix[0, 0] * d_matrix[1, 1] - d_matrix[0, 1] ** 2
    half_trace = 0.5 * (d_matrix[0, 0] + d_matrix[1, 1])
    if d_matrix[0, 0] <= 0.0 or det < SINGULAR_REL_TOL * half_trace**2:
        raise SingularDesign(f"local design matrix is singular at a={a:g}")

    beta = np.asarray(beta, dtype=float)
    if pseudo is None:
        pseudo = compute_pseudo(data, fit)
    xi = pseudo.values
    u = (data.treatment - a) / h
    k = scaled_weights(data.treatment, a, spec)
    resid = xi - (beta[0] + beta[1] * u)
    estimating = np.stack([k * resid, k * u * resid], axis=1)

    lo = max(a - h, data.support[0])
    hi = min(a + h, data.support[1])
    if hi > lo:
        nodes, weights = _simpson_nodes(lo, hi, quad_points)
        k_nodes = scaled_weights(nodes, a, spec)
        u_nodes = (nodes - a) / h
        varpi_nodes = np.asarray(fit.marginal_density(nodes))
        m_nodes = np.asarray(fit.reg_curve(nodes))
        mu_grid = fit.outcome_reg.grid(data.covariates, nodes)
        dev = mu_grid - m_nodes[None, :]
        base = weights * k_nodes * varpi_nodes
        integral = np.stack([dev @ base, dev @ (base * u_nodes)], axis=1)
    else:
        integral = np.zeros_like(estimating)

    phi = np.linalg.solve(d_matrix, (estimating + integral).T).T
    return InfluenceValues(phi=phi, d_matrix=d_matrix)


def influence_variance(values: InfluenceValues) -> float:
    """The (1,1) entry of P_n{phi phi^T}, via compensated summation."""
    first = values.phi[:, 0]
    return math.fsum(first * first) / first.shape[0]
