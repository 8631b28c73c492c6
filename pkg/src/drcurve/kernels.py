"""Kernel functions and local-linear smoothing.

Every curve estimator in this package is a linear smoother: the value at a
point ``a`` is the intercept of a kernel-weighted least squares line fitted
in the scaled basis ``g(t) = (1, (t - a) / h)``.  This module provides the
kernel families, their moments, the scalar fit, materialized smoother
weights, hat diagonals, and a batched fitter used by bandwidth selection
and curve evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import SingularDesign

KERNEL_FAMILIES = ("epanechnikov", "uniform", "truncated_gaussian")

# Scale-free guard for the 2x2 weighted design matrix: singular when
# det < SINGULAR_REL_TOL * (trace/2)^2.
SINGULAR_REL_TOL = 1e-12

_PHI1 = 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))  # standard normal CDF at 1
_TG_NORM = 2.0 * _PHI1 - 1.0  # mass of N(0,1) on [-1, 1]

# Batched fitter: evaluation points per chunk; window columns per inner pass.
_CHUNK_POINTS = 256
_CHUNK_COLUMNS = 1 << 16
# Power-sum path: worthwhile once windows hold thousands of points, where
# it is both fast and numerically safe (window power sums stay large
# relative to prefix-sum rounding once the window spans a few percent of
# the data range on samples this big).
_PREFIX_MIN_N = 4000
_PREFIX_MIN_WINDOW_FRACTION = 0.06


@dataclass(frozen=True)
class KernelSpec:
    """A kernel family plus bandwidth, defining K_ha(t) = K((t-a)/h)/h."""

    family: str = "epanechnikov"
    bandwidth: float = 1.0

    def __post_init__(self) -> None:
        if self.family not in KERNEL_FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if not (self.bandwidth > 0.0 and math.isfinite(self.bandwidth)):
            raise ValueError("bandwidth must be a positive finite real")


@dataclass(frozen=True)
class LocalFitBasis:
    """The scaled affine basis g(t) = (1, (t - center) / bandwidth)."""

    center: float
    bandwidth: float

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return np.stack([np.ones_like(t), (t - self.center) / self.bandwidth], axis=-1)


def _base_kernel(u: np.ndarray, family: str) -> np.ndarray:
    inside = np.abs(u) <= 1.0
    if family == "epanechnikov":
        vals = 0.75 * (1.0 - u * u)
    elif family == "uniform":
        vals = np.full_like(u, 0.5)
    else:  # truncated_gaussian
        vals = np.exp(-0.5 * u * u) / (math.sqrt(2.0 * math.pi) * _TG_NORM)
    return np.where(inside, vals, 0.0)


def eval_kernel(u, spec: KernelSpec):
    """Evaluate the base kernel K(u); zero outside [-1, 1]."""
    u = np.asarray(u, dtype=float)
    out = _base_kernel(u, spec.family)
    return float(out) if out.ndim == 0 else out


def kernel_at_zero(spec: KernelSpec) -> float:
    """Kernel value at zero for the given family."""
    if spec.family == "epanechnikov":
        return 0.75
    if spec.family == "uniform":
        return 0.5
    return 1.0 / (math.sqrt(2.0 * math.pi) * _TG_NORM)


def kernel_moments(spec: KernelSpec) -> tuple[float, float]:
    """Return (nu2, rk) with nu2 = int u^2 K(u) du and rk = int K(u)^2 du.

    Both integrals run over the kernel support [-1, 1] and have closed
    forms for all three families.
    """
    if spec.family == "epanechnikov":
        return 0.2, 0.6
    if spec.family == "uniform":
        return 1.0 / 3.0, 0.5
    phi1 = math.exp(-0.5) / math.sqrt(2.0 * math.pi)
    nu2 = 1.0 - 2.0 * phi1 / _TG_NORM
    rk = math.erf(1.0) / (2.0 * math.sqrt(math.pi) * _TG_NORM**2)
    return nu2, rk


def scaled_weights(treatments, a: float, spec: KernelSpec) -> np.ndarray:
    """Kernel weights K_ha(t) = K((t - a)/h) / h at the given center."""
    t = np.asarray(treatments, dtype=float)
    h = spec.bandwidth
    return _base_kernel((t - a) / h, spec.family) / h


def _window_is_open(family: str) -> bool:
    # Epanechnikov vanishes at the support edge, so boundary points carry
    # no weight; uniform and truncated Gaussian keep positive edge weight.
    return family == "epanechnikov"


def _design_sums(treatments, responses, a: float, spec: KernelSpec):
    """Empirical moments S_j = P_n{K_ha(A) U^j}, T_j = P_n{K_ha(A) U^j xi}."""
    t = np.asarray(treatments, dtype=float)
    h = spec.bandwidth
    u = (t - a) / h
    w = _base_kernel(u, spec.family) / h
    n = t.shape[0]
    wu = w * u
    s0 = float(np.sum(w)) / n
    s1 = float(np.sum(wu)) / n
    s2 = float(np.sum(wu * u)) / n
    if responses is None:
        return s0, s1, s2, None, None, u, w
    xi = np.asarray(responses, dtype=float)
    t0 = float(np.sum(w * xi)) / n
    t1 = float(np.sum(wu * xi)) / n
    return s0, s1, s2, t0, t1, u, w


def _check_window(treatments, a: float, spec: KernelSpec) -> None:
    t = np.asarray(treatments, dtype=float)
    h = spec.bandwidth
    if _window_is_open(spec.family):
        inside = t[(t > a - h) & (t < a + h)]
    else:
        inside = t[(t >= a - h) & (t <= a + h)]
    if inside.size < 2 or np.max(inside) <= np.min(inside):
        raise SingularDesign(
            f"kernel window at a={a:g} (h={h:g}) holds fewer than 2 distinct treatments"
        )


def _singular(s0: float, s1: float, s2: float) -> bool:
    det = s0 * s2 - s1 * s1
    half_trace = 0.5 * (s0 + s2)
    return s0 <= 0.0 or det < SINGULAR_REL_TOL * half_trace * half_trace


def local_linear_fit(treatments, responses, a: float, spec: KernelSpec) -> tuple[float, float]:
    """Kernel-weighted least squares line through (A_i, xi_i) at center a.

    Returns (b0, b1) minimizing P_n[K_ha(A){xi - b0 - b1 (A-a)/h}^2]; b0 is
    the curve estimate at a, b1 the slope in basis units (h times the raw
    slope).

    Raises
    ------
    SingularDesign
        If the window holds fewer than 2 distinct treatments or the 2x2
        weighted design matrix is numerically singular.
    """
    _check_window(treatments, a, spec)
    s0, s1, s2, t0, t1, _, _ = _design_sums(treatments, responses, a, spec)
    if _singular(s0, s1, s2):
        raise SingularDesign(f"weighted design matrix is singular at a={a:g}")
    det = s0 * s2 - s1 * s1
    return (s2 * t0 - s1 * t1) / det, (s0 * t1 - s1 * t0) / det


def design_matrix(treatments, a: float, spec: KernelSpec) -> np.ndarray:
    """The 2x2 matrix P_n{g_ha(A) K_ha(A) g_ha(A)^T} at center a.

    Entries use compensated summation so the result is stable against
    reordering of the observations.
    """
    t = np.asarray(treatments, dtype=float)
    h = spec.bandwidth
    u = (t - a) / h
    w = _base_kernel(u, spec.family) / h
    n = t.shape[0]
    s0 = math.fsum(w) / n
    s1 = math.fsum(w * u) / n
    s2 = math.fsum(w * u * u) / n
    return np.array([[s0, s1], [s1, s2]])


def smoother_row(treatments, a: float, spec: KernelSpec) -> np.ndarray:
    """Weights w with b0 = sum_i w_i xi_i for any responses; sum(w) = 1."""
    _check_window(treatments, a, spec)
    s0, s1, s2, _, _, u, w = _design_sums(treatments, None, a, spec)
    if _singular(s0, s1, s2):
        raise SingularDesign(f"weighted design matrix is singular at a={a:g}")
    det = s0 * s2 - s1 * s1
    n = len(w)
    return (s2 - s1 * u) * w / (det * n)


def hat_diagonal(treatments, i: int, spec: KernelSpec) -> float:
    """Self-weight of observation i in the smoother centered at A_i.

    Equals smoother_row(treatments, A_i, spec)[i]; in matrix terms it is
    (1,0) P_n{g K g^T}^{-1} (1,0)^T K(0) / (n h).
    """
    t = np.asarray(treatments, dtype=float)
    a = float(t[i])
    _check_window(t, a, spec)
    s0, s1, s2, _, _, _, _ = _design_sums(t, None, a, spec)
    if _singular(s0, s1, s2):
        raise SingularDesign(f"weighted design matrix is singular at a={a:g}")
    det = s0 * s2 - s1 * s1
    return s2 / det * kernel_at_zero(spec) / (spec.bandwidth * t.shape[0])


def _prefix_pointwise(ts, xs, ps, spec: KernelSpec, with_hat: bool):
    """Local-linear fits at many centers via windowed power sums.

    Valid for polynomial kernels (epanechnikov, uniform).  All required
    kernel-weighted design sums are linear combinations of windowed sums
    of t^k and t^k xi, which come from prefix sums and two searchsorted
    calls per moment order; the cost is O(n log n) independent of the
    window width.  Used only for wide windows on large samples, where the
    window sums are large relative to prefix-sum rounding.
    """
    n = ts.shape[0]
    h = spec.bandwidth
    open_window = _window_is_open(spec.family)
    lo_side, hi_side = ("right", "left") if open_window else ("left", "right")
    lo = np.searchsorted(ts, ps - h, side=lo_side)
    hi = np.searchsorted(ts, ps + h, side=hi_side)

    max_k = 4 if spec.family == "epanechnikov" else 2
    w_mom = []
    v_mom = []
    power = np.ones(n)
    for k in range(max_k + 1):
        if k > 0:
            power = power * ts
        pref_t = np.concatenate([[0.0], np.cumsum(power)])
        w_mom.append(pref_t[hi] - pref_t[lo])
        if k <= max_k - 1:
            pref_x = np.concatenate([[0.0], np.cumsum(power * xs)])
            v_mom.append(pref_x[hi] - pref_x[lo])

    def binom_comb(moments, k):
        # sum over the window of (t - a)^k from raw power sums.
        out = np.zeros(ps.shape[0])
        for m in range(k + 1):
            out += math.comb(k, m) * moments[m] * (-ps) ** (k - m)
        return out

    w = [binom_comb(w_mom, k) for k in range(max_k + 1)]
    v = [binom_comb(v_mom, k) for k in range(max_k)]
    scale = 1.0 / (n * h)
    if spec.family == "epanechnikov":
        s0 = 0.75 * scale * (w[0] - w[2] / h**2)
        s1 = 0.75 * scale * (w[1] / h - w[3] / h**3)
        s2 = 0.75 * scale * (w[2] / h**2 - w[4] / h**4)
        t0 = 0.75 * scale * (v[0] - v[2] / h**2)
        t1 = 0.75 * scale * (v[1] / h - v[3] / h**3)
    else:  # uniform
        s0 = 0.5 * scale * w[0]
        s1 = 0.5 * scale * w[1] / h
        s2 = 0.5 * scale * w[2] / h**2
        t0 = 0.5 * scale * v[0]
        t1 = 0.5 * scale * v[1] / h

    det = s0 * s2 - s1 * s1
    half_trace = 0.5 * (s0 + s2)
    has_two = (hi - lo >= 2) & (ts[np.minimum(hi, n) - 1] > ts[np.minimum(lo, n - 1)])
    good = has_two & (s0 > 0.0) & (det >= SINGULAR_REL_TOL * half_trace**2)
    with np.errstate(divide="ignore", invalid="ignore"):
        est = (s2 * t0 - s1 * t1) / det
        hat = s2 / det * kernel_at_zero(spec) / (h * n) if with_hat else None
    est = np.where(good, est, np.nan)
    if with_hat:
        hat = np.where(good, hat, np.nan)
    return est, hat, good


def pointwise_fit(
    treatments,
    responses,
    spec: KernelSpec,
    points=None,
    with_hat: bool = False,
):
    """Local-linear fit at many centers in one pass.

    Treatments are sorted once and evaluation points are processed in
    sorted chunks, touching only the columns inside the union kernel
    window of each chunk, so the cost scales with the number of
    (point, in-window observation) pairs rather than with n^2.

    Parameters
    ----------
    points
        Evaluation centers; defaults to the treatments themselves (the
        configuration needed for leave-one-out risk).
    with_hat
        Also return the hat diagonal at every point (only meaningful when
        points are the treatments).

    Returns
    -------
    estimates : ndarray
        Fitted intercepts; NaN where the design is singular.
    hat : ndarray or None
        Hat diagonals (NaN where singular) when with_hat is set.
    ok : ndarray of bool
        Feasibility mask (False marks SingularDesign points).
    """
    t = np.asarray(treatments, dtype=float)
    xi = np.asarray(responses, dtype=float)
    pts = t if points is None else np.asarray(points, dtype=float)
    n = t.shape[0]
    h = spec.bandwidth

    order = np.argsort(t, kind="stable")
    ts = t[order]
    xs = xi[order]

    p_order = np.argsort(pts, kind="stable")
    ps = pts[p_order]
    m = ps.shape[0]

    span = ts[-1] - ts[0] if n > 1 else 0.0
    if (
        spec.family in ("epanechnikov", "uniform")
        and n >= _PREFIX_MIN_N
        and span > 0.0
        and 2.0 * h >= _PREFIX_MIN_WINDOW_FRACTION * span
    ):
        est_s, hat_s, ok_s = _prefix_pointwise(ts, xs, ps, spec, with_hat)
        inv = np.empty(m, dtype=int)
        inv[p_order] = np.arange(m)
        return est_s[inv], hat_s[inv] if with_hat else None, ok_s[inv]

    est_s = np.full(m, np.nan)
    hat_s = np.full(m, np.nan) if with_hat else None
    ok_s = np.zeros(m, dtype=bool)

    open_window = _window_is_open(spec.family)
    lo_side, hi_side = ("right", "left") if open_window else ("left", "right")
    k_zero = kernel_at_zero(spec)

    for start in range(0, m, _CHUNK_POINTS):
        chunk = ps[start : start + _CHUNK_POINTS]
        lo = np.searchsorted(ts, chunk[0] - h, side=lo_side)
        hi = np.searchsorted(ts, chunk[-1] + h, side=hi_side)
        if hi <= lo:
            continue
        s0 = np.zeros(chunk.shape[0])
        s1 = np.zeros(chunk.shape[0])
        s2 = np.zeros(chunk.shape[0])
        t0 = np.zeros(chunk.shape[0])
        t1 = np.zeros(chunk.shape[0])
        for cstart in range(lo, hi, _CHUNK_COLUMNS):
            cend = min(cstart + _CHUNK_COLUMNS, hi)
            u = (ts[cstart:cend][None, :] - chunk[:, None]) / h
            w = _base_kernel(u, spec.family)
            wu = w * u
            wuu = wu * u
            s0 += w.sum(axis=1)
            s1 += wu.sum(axis=1)
            s2 += wuu.sum(axis=1)
            t0 += w @ xs[cstart:cend]
            t1 += wu @ xs[cstart:cend]
        scale = 1.0 / (n * h)
        s0 *= scale
        s1 *= scale
        s2 *= scale
        t0 *= scale
        t1 *= scale

        det = s0 * s2 - s1 * s1
        half_trace = 0.5 * (s0 + s2)
        # Distinct-treatment count inside each point's own window.
        w_lo = np.searchsorted(ts, chunk - h, side=lo_side)
        w_hi = np.searchsorted(ts, chunk + h, side=hi_side)
        has_two = (w_hi - w_lo >= 2) & (
            ts[np.minimum(w_hi, n) - 1] > ts[np.minimum(w_lo, n - 1)]
        )
        good = has_two & (s0 > 0.0) & (det >= SINGULAR_REL_TOL * half_trace**2)

        sl = slice(start, start + chunk.shape[0])
        with np.errstate(divide="ignore", invalid="ignore"):
            est = (s2 * t0 - s1 * t1) / det
            if with_hat:
                hat = s2 / det * k_zero / (h * n)
        est_s[sl] = np.where(good, est, np.nan)
        if with_hat:
            hat_s[sl] = np.where(good, hat, np.nan)
        ok_s[sl] = good

    inv = np.empty(m, dtype=int)
    inv[p_order] = np.arange(m)
    estimates = est_s[inv]
    ok = ok_s[inv]
    hat = hat_s[inv] if with_hat else None
    return estimates, hat, ok
