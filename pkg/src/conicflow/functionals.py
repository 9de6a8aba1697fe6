"""Scalar functionals monitored along the flow.

All evaluations use the calibrated scales from :mod:`conicflow.geometry`;
Dirichlet energies come from the same stencil as the Laplacian, so discrete
integration by parts is exact and the translation identities hold to
round-off.

On the eps-smoothed background the full Gauss-Bonnet mass is 2, not
chi(S^2, beta), so the Poisson problems for the Ricci potential and for the
background potential h are solvable only after removing the mean of the
right-hand side (the resolved cone mass).  The removed mean is reported,
never silently dropped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .geometry import (
    BackgroundMetric,
    MetricState,
    conical_curvature,
    dirichlet_energy,
    grad_sq_field,
    integrate,
    laplacian,
    scalar_curvature,
)


# ----------------------------------------------------------------------
# Poisson solves
# ----------------------------------------------------------------------


def _poisson(grid, masses, rhs):
    """Solve Lap v = rhs for the metric with node masses ``masses``.

    The rhs is first shifted to have zero metric mean (the shift is the
    solvability correction); the additive constant of v is left at v[0] = 0
    for the caller to fix by normalization.  Returns (v, correction).
    """
    total = float(np.sum(masses))
    correction = float(np.sum(rhs * masses)) / total
    b = -(rhs - correction) * masses
    b -= b.sum() / b.size  # keep the grounded solve consistent to round-off
    v = grid.ground_solve(b)
    return v, correction


@dataclass
class RicciPotential:
    """Solution of Lap v = R - chi/2 normalized by int e^(-v) dg = 2.

    R here is the smooth-part (conical) curvature, so at a conical
    constant-curvature state v vanishes away from the cone cores."""

    v: np.ndarray
    normalization_residual: float
    mean_correction: float  # resolved cone mass removed from the rhs


def ricci_potential(state: MetricState) -> RicciPotential:
    bg = state.background
    R = conical_curvature(state)
    rhs = R - 0.5 * bg.chi()
    v, corr = _poisson(state.grid, state.mass, rhs)
    v = v + math.log(integrate(np.exp(-v), state) / 2.0)
    resid = abs(integrate(np.exp(-v), state) - 2.0)
    return RicciPotential(v, resid, corr)


@dataclass
class PotentialPair:
    """Potential phi of the state relative to the background metric."""

    phi: np.ndarray
    gauge: str
    mean_correction: float


def recover_potential(state: MetricState) -> PotentialPair:
    """Solve Lap_bg phi = e^u - 1 (the density-potential relation), with the
    constant fixed by int phi dg_bg = 0."""
    bg = state.background
    area = state.area()
    rhs = np.exp(state.u) * (2.0 / area) - 1.0
    phi, corr = _poisson(state.grid, bg.mass, rhs)
    phi -= np.sum(phi * bg.mass) / 2.0
    return PotentialPair(phi, "background", corr)


def h_background(bg: BackgroundMetric) -> np.ndarray:
    """Ricci potential h of the background: Lap_bg h = R_bg - chi/2
    (mean-corrected), normalized by int e^h dg_bg = 2.  Cached on bg."""
    if bg.h is None:
        r_cone = bg.R - (bg.cone_term if bg.cone_term is not None else 0.0)
        rhs = r_cone - 0.5 * bg.chi()
        h, corr = _poisson(bg.grid, bg.mass, rhs)
        h += math.log(2.0 / float(np.sum(np.exp(h) * bg.mass)))
        bg.h = h
        bg.h_correction = corr
    return bg.h


# ----------------------------------------------------------------------
# the F functional
# ----------------------------------------------------------------------


def f_beta(state_or_phi, background: BackgroundMetric = None) -> float:
    """Ding-type energy with the conical background as reference metric.

    F(phi) = E(phi)/4 - (1/2) int phi dg_bg
             - (2/chi) log int e^(-chi phi / 2 + h) dg_bg,

    where E is the calibrated Dirichlet energy.  Decreases along the flow;
    invariant under phi -> phi + const.
    """
    phi, bg = _phi_and_bg(state_or_phi, background)
    chi = bg.chi()
    h = h_background(bg)
    e = dirichlet_energy(phi, phi, bg.grid)
    lin = float(np.sum(phi * bg.mass))
    z = float(np.sum(np.exp(-0.5 * chi * phi + h) * bg.mass))
    return 0.25 * e - 0.5 * lin - (2.0 / chi) * math.log(z)


def f_beta_eps(state_or_phi, eps_f: float, background: BackgroundMetric = None) -> float:
    """The eps-modified F with exponent chi/2 - eps_f in the log term."""
    phi, bg = _phi_and_bg(state_or_phi, background)
    chi = bg.chi()
    if not 0.0 < eps_f < 0.5 * chi:
        raise ValueError(f"need 0 < eps_f < chi/2 = {0.5 * chi}")
    h = h_background(bg)
    a = 0.5 * chi - eps_f
    e = dirichlet_energy(phi, phi, bg.grid)
    lin = float(np.sum(phi * bg.mass))
    z = float(np.sum(np.exp(-a * phi + h) * bg.mass))
    return 0.25 * e - 0.5 * lin - math.log(z) / a


def lower_bound_monitor(state_or_phi, eps: float, background: BackgroundMetric = None) -> float:
    """F(phi) + eps * E(phi): stays bounded below along semi-stable runs."""
    phi, bg = _phi_and_bg(state_or_phi, background)
    return f_beta(phi, bg) + eps * dirichlet_energy(phi, phi, bg.grid)


def f_beta_rate_oracle(state: MetricState, v: np.ndarray = None) -> float:
    """Closed-form dF/dt along the flow, for cross-checking the trace.

    Equals (1/2) int v dg - int v e^v dg / int e^v dg, which is
    -(1/2) int w (1 - e^(-w)) dg for w = -v shifted to int e^(-w) dg = 2;
    nonpositive, vanishing only at constant curvature.
    """
    if v is None:
        v = ricci_potential(state).v
    ev = np.exp(v)
    return 0.5 * integrate(v, state) - integrate(v * ev, state) / integrate(ev, state)


def _phi_and_bg(state_or_phi, background):
    if isinstance(state_or_phi, MetricState):
        return recover_potential(state_or_phi).phi, state_or_phi.background
    if background is None:
        raise ValueError("a background is required when passing a raw potential")
    return np.asarray(state_or_phi, dtype=float), background


# ----------------------------------------------------------------------
# entropy functionals
# ----------------------------------------------------------------------


def w_functional(state: MetricState, f, tau: float) -> float:
    """W(g, f, tau) = int (tau (R + |grad f|^2) + f - 2) e^(-f)/(4 pi tau) dg.

    R is the smooth-part curvature: the entropy integral lives on the
    punctured sphere, where the cone masses enter only through chi."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    f = np.asarray(f, dtype=float)
    R = conical_curvature(state)
    g2 = grad_sq_field(f, state)
    integrand = (tau * (R + g2) + f - 2.0) * np.exp(-f) / (4.0 * math.pi * tau)
    return integrate(integrand, state)


def normalized_w(state: MetricState, f, return_shift: bool = False):
    """Normalized entropy int [(R + |grad f|^2)/(2 - sum beta) + f] e^(-f) dg.

    The constraint int e^(-f) dg = 2 is enforced by an additive shift of f
    (idempotent; the shift is returned on request).
    """
    f = np.asarray(f, dtype=float)
    chi = state.background.chi()
    shift = math.log(integrate(np.exp(-f), state) / 2.0)
    f = f + shift
    R = conical_curvature(state)
    g2 = grad_sq_field(f, state)
    w = integrate(((R + g2) / chi + f) * np.exp(-f), state)
    return (w, shift) if return_shift else w


@dataclass
class MuEstimate:
    value: float
    tag: str = "upper-bound estimate"
    history: np.ndarray = field(default=None, repr=False)
    iterations: int = 0


def mu_estimate(state: MetricState, budget: int = 60) -> MuEstimate:
    """Upper bound on mu(g) by constrained descent of the normalized entropy.

    Starts from the natural candidate f = -v (Ricci potential) and performs
    projected gradient descent on f under int e^(-f) dg = 2, accepting only
    decreasing steps.  The result is an upper bound for the infimum, never a
    certified value; it is monotone non-increasing in the budget.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    bg = state.background
    a = 1.0 / bg.chi()
    R = conical_curvature(state)
    f = -ricci_potential(state).v
    f = f + math.log(integrate(np.exp(-f), state) / 2.0)

    def w_of(fld):
        g2 = grad_sq_field(fld, state)
        return integrate(((R + g2) * a + fld) * np.exp(-fld), state)

    w = w_of(f)
    history = [w]
    step = 0.25
    it = 0
    for it in range(1, budget + 1):
        grad = -2.0 * a * laplacian(f, state) + a * grad_sq_field(f, state) - a * R - f + 1.0
        weight = np.exp(-f) * state.mass
        grad = grad - float(np.sum(grad * weight)) / float(np.sum(weight))
        gnorm2 = float(np.sum(grad * grad * weight))
        if gnorm2 < 1e-24:
            break
        accepted = False
        for _ in range(25):
            cand = f - step * grad
            cand = cand + math.log(integrate(np.exp(-cand), state) / 2.0)
            wc = w_of(cand)
            if wc < w - 1e-15:
                f, w = cand, wc
                step *= 1.3
                accepted = True
                break
            step *= 0.5
        history.append(w)
        if not accepted:
            break
        if len(history) > 2 and history[-2] - history[-1] < 1e-13:
            break
    if not np.isfinite(w):
        raise RuntimeError("entropy descent diverged")
    return MuEstimate(w, history=np.asarray(history), iterations=it)


def chow_shift(s0: float, t: float, half_chi: float) -> float:
    """Closed-form solution of ds/dt = s (s - chi/2) with s(0) = s0."""
    r = half_chi
    if t < 0:
        raise ValueError("t must be nonnegative")
    if s0 == 0.0:
        return 0.0
    if r == 0.0:
        den = 1.0 - s0 * t
        if den <= 0:
            raise ValueError("shift ODE blew up (s0 too large)")
        return s0 / den
    den = s0 + (r - s0) * math.exp(min(r * t, 700.0))
    if not math.isfinite(den) or (r > 0 and den <= 0.0):
        raise ValueError("shift ODE blew up (need s0 < chi/2)")
    return r * s0 / den


def hamilton_entropy(state: MetricState, s: float = 0.0) -> float:
    """N = int (R - s) log (R - s) dg; requires R - s > 0 everywhere."""
    R = conical_curvature(state) - s
    if np.any(R <= 0.0):
        bad = int(np.argmin(R))
        raise ValueError(f"R - s is not positive (node {bad}, value {R[bad]:.3e})")
    return integrate(R * np.log(R), state)


# ----------------------------------------------------------------------
# soliton residual: trace-free Hessian of the Ricci potential
# ----------------------------------------------------------------------


def _theta_derivative(f2d: np.ndarray, h: float):
    """Uniform centered first/second derivatives along axis 0 (rows 1..-2)."""
    df = np.zeros_like(f2d)
    d2f = np.zeros_like(f2d)
    df[1:-1] = (f2d[2:] - f2d[:-2]) / (2.0 * h)
    d2f[1:-1] = (f2d[2:] - 2.0 * f2d[1:-1] + f2d[:-2]) / (h * h)
    return df, d2f


def soliton_residual(
    state: MetricState, v: np.ndarray = None, exclude_radius: float = None
) -> float:
    """integral |grad^2 v - (Lap v) g / 2|^2 dg by finite differences.

    Computed in conformal (Mercator) coordinates where the trace-free
    Hessian reduces to the single complex quantity
    d^2_z v - (d_z log H)(d_z v); zero exactly when v generates a gradient
    soliton / conformal Killing structure.  The Hessian here is the
    Riemannian one of the area-2-normalized metric.  The two pole rows and
    geodesic balls of radius ``exclude_radius`` (default max(0.15, 2 eps))
    around the marked points are excluded: inside the smoothed cores the
    potential carries the eps-regularization bowl, not geometry.
    """
    grid = state.grid
    if v is None:
        v = ricci_potential(state).v
    if exclude_radius is None:
        exclude_radius = max(0.15, 2.0 * state.background.eps)
    core_mask = np.ones(grid.n, dtype=bool)
    for p in grid.marked_points:
        core_mask &= geo.distances_from(state, p) > exclude_radius
    nlat, nlon = grid.n_lat, grid.n_lon
    v2 = np.asarray(v, dtype=float).reshape(nlat, nlon)
    log_dens = (state.background.log_rho + state.u).reshape(nlat, nlon)
    sin_th = np.sin(grid.theta)[:, None]
    cos_th = np.cos(grid.theta)[:, None]
    logH = math.log(geo.ROUND_R2) + log_dens + 2.0 * np.log(sin_th)
    h_th = grid.h_theta

    # d/dm = sin(theta) d/dtheta; theta differences are uniform, so the
    # stencil error stays O(h^2) into the (excluded) pole caps
    v_th, v_thth = _theta_derivative(v2, h_th)
    v_m = sin_th * v_th
    v_mm = sin_th * sin_th * v_thth + sin_th * cos_th * v_th
    ld_th, _ = _theta_derivative(log_dens, h_th)
    lh_m = sin_th * ld_th + 2.0 * cos_th  # round part differentiated exactly
    if nlon > 1:
        h_eta = geo.TWO_PI / nlon
        v_e = (np.roll(v2, -1, axis=1) - np.roll(v2, 1, axis=1)) / (2 * h_eta)
        v_ee = (np.roll(v2, -1, axis=1) - 2 * v2 + np.roll(v2, 1, axis=1)) / h_eta**2
        v_e_th, _ = _theta_derivative(v_e, h_th)
        v_me = sin_th * v_e_th
        lh_e = (np.roll(log_dens, -1, axis=1) - np.roll(log_dens, 1, axis=1)) / (2 * h_eta)
    else:
        v_e = v_ee = v_me = lh_e = np.zeros_like(v2)

    t_re = 0.25 * (v_mm - v_ee) - 0.25 * (lh_m * v_m - lh_e * v_e)
    t_im = -0.5 * v_me + 0.25 * (lh_m * v_e + lh_e * v_m)
    dens = 8.0 * (t_re**2 + t_im**2) * np.exp(-2.0 * logH)
    weight = (state.mass * core_mask).reshape(nlat, nlon)
    weight[:2, :] = 0.0  # pole rows amplify FD error by 1/sin^4
    weight[-2:, :] = 0.0
    return float(np.sum(dens * weight))
