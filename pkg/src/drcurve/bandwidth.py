"""Bandwidth selection.

Leave-one-out cross-validation on the pseudo-outcome regression, using the
hat-diagonal shortcut exact for linear smoothers, plus the oracle selector
available in simulations where the true curve is known.  Infeasible
bandwidths (windows too empty to fit a line, or self-weights reaching one)
are encoded as infinite risk rather than raised, so the optimizer simply
avoids them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .kernels import KernelSpec, pointwise_fit
from .pseudo import compute_pseudo

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
_LOG_TOL = 2e-3
_MAX_GOLDEN_ITERS = 80


@dataclass(frozen=True)
class BandwidthSearch:
    """Search settings plus, once completed, the selected bandwidth."""

    h_min: float
    h_max: float
    optimizer: str = "golden_section"
    grid_size: int = 20
    selected: float | None = None
    risk_at_selected: float | None = None

    def __post_init__(self) -> None:
        if not (0.0 < self.h_min <= self.h_max):
            raise ValueError("need 0 < h_min <= h_max")
        if self.optimizer not in ("golden_section", "grid"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.grid_size < 2:
            raise ValueError("grid_size must be at least 2")
        if self.selected is not None and not (
            self.h_min <= self.selected <= self.h_max
        ):
            raise ValueError("selected bandwidth must lie in the range")


def default_search_range(treatments, grid_size: int = 20) -> BandwidthSearch:
    """Scale-free default range [0.05 * sd(A), 5 * range(A)]."""
    t = np.asarray(treatments, dtype=float)
    spread = float(t.max() - t.min())
    sd = float(t.std())
    if spread <= 0.0 or sd <= 0.0:
        raise ValueError("treatments are constant; no bandwidth is feasible")
    return BandwidthSearch(h_min=0.05 * sd, h_max=5.0 * spread, grid_size=grid_size)


def _pseudo_values(pseudo) -> np.ndarray:
    return np.asarray(getattr(pseudo, "values", pseudo), dtype=float)


def loo_risk(h: float, treatments, pseudo, family: str = "epanechnikov") -> float:
    """Leave-one-out risk of the local-linear smooth at bandwidth h.

    Uses the shortcut sum_i [(xi_i - fit(A_i)) / (1 - W_h(A_i))]^2, which
    equals the brute-force refit criterion exactly for linear smoothers.
    Returns +inf when any point has a singular design or a self-weight of
    one or more.
    """
    xi = _pseudo_values(pseudo)
    t = np.asarray(treatments, dtype=float)
    spec = KernelSpec(family, float(h))
    fitted, hat, ok = pointwise_fit(t, xi, spec, with_hat=True)
    if not ok.all() or np.any(hat >= 1.0):
        return math.inf
    resid = (xi - fitted) / (1.0 - hat)
    return float(np.sum(resid * resid))


def oracle_risk(
    h: float, treatments, truth, pseudo, family: str = "epanechnikov"
) -> float:
    """Oracle risk P_n[{theta(A) - fit(A)}^2] at bandwidth h."""
    xi = _pseudo_values(pseudo)
    t = np.asarray(treatments, dtype=float)
    spec = KernelSpec(family, float(h))
    fitted, _, ok = pointwise_fit(t, xi, spec)
    if not ok.all():
        return math.inf
    err = np.asarray(truth(t)) - fitted
    return float(np.mean(err * err))


def _minimize(risk_fn, search: BandwidthSearch) -> BandwidthSearch:
    """Log-grid scan to bracket the minimum, then golden-section on log h."""

    def clamp(h: float) -> float:
        # exp(log h) can land an ulp outside the range.
        return min(max(h, search.h_min), search.h_max)

    if search.h_min == search.h_max:
        h = search.h_min
        return replace(search, selected=h, risk_at_selected=risk_fn(h))
    logs = np.linspace(math.log(search.h_min), math.log(search.h_max), search.grid_size)
    risks = [risk_fn(math.exp(x)) for x in logs]
    best_i = int(np.argmin(risks))
    best_x, best_f = logs[best_i], risks[best_i]
    if math.isinf(best_f):
        # No feasible bandwidth in the range; report the widest one.
        return replace(search, selected=search.h_max, risk_at_selected=math.inf)
    if search.optimizer == "grid":
        return replace(
            search, selected=clamp(math.exp(best_x)), risk_at_selected=best_f
        )

    lo = logs[max(best_i - 1, 0)]
    hi = logs[min(best_i + 1, len(logs) - 1)]
    c = hi - _GOLDEN * (hi - lo)
    d = lo + _GOLDEN * (hi - lo)
    fc = risk_fn(math.exp(c))
    fd = risk_fn(math.exp(d))
    for _ in range(_MAX_GOLDEN_ITERS):
        if hi - lo <= _LOG_TOL:
            break
        if fc <= fd:
            hi, d, fd = d, c, fc
            c = hi - _GOLDEN * (hi - lo)
            fc = risk_fn(math.exp(c))
        else:
            lo, c, fc = c, d, fd
            d = lo + _GOLDEN * (hi - lo)
            fd = risk_fn(math.exp(d))
        if fc < best_f:
            best_x, best_f = c, fc
        if fd < best_f:
            best_x, best_f = d, fd
    return replace(search, selected=clamp(math.exp(best_x)), risk_at_selected=best_f)


def select_bandwidth(
    treatments, pseudo, family: str = "epanechnikov", search: BandwidthSearch | None = None
) -> BandwidthSearch:
    """Select the bandwidth minimizing the leave-one-out risk."""
    if search is None:
        search = default_search_range(treatments)
    return _minimize(lambda h: loo_risk(h, treatments, pseudo, family), search)


def oracle_bandwidth(
    treatments,
    truth,
    data,
    fit,
    family: str = "epanechnikov",
    search: BandwidthSearch | None = None,
) -> BandwidthSearch:
    """Select the bandwidth minimizing the oracle risk against a known curve."""
    if search is None:
        search = default_search_range(treatments)
    pseudo = compute_pseudo(data, fit)
    return _minimize(
        lambda h: oracle_risk(h, treatments, truth, pseudo, family), search
    )
