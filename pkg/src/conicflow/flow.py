"""Time integration of the normalized conical Ricci flow in the conformal
factor gauge.

The evolution is ``du/dt = chi/2 - R(u)``, algebraically identical to
``e^-u Lap_bg u + chi/2 - e^-u R_bg``; both forms are available and agree to
round-off (asserted in debug mode).  Steppers:

* ``rk2`` -- explicit midpoint with a Gershgorin CFL guard.  On 2-D grids
  the zonal cells at the poles make the guard scale like (h_theta * h_eta)^2,
  so this stepper is only practical for short horizons;
* ``semi_implicit`` -- backward-Euler treatment of the linearized diffusion
  (the e^-u Lap_bg part frozen at the current factor), one SPD sparse solve
  per step.  This is the shipped default for production runs.

After every ``renormalize_every`` steps the area is restored to 2 by an
additive constant and the constant is recorded in the trace: at eps > 0 the
smoothed cone mass makes the area drift at rate sum(beta) per unit time, and
hiding that drift would mask the eps-convergence behavior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import diagnostics as diag
from . import functionals as fn
from . import geometry as geo
from .marked_sphere import Divisor

CFL_SAFETY = 0.9  # fraction of the RK2 real-axis stability interval used

STEPPERS = ("semi_implicit", "rk2")
INITIALS = ("zero", "bump", "soliton")


@dataclass
class FlowConfig:
    divisor: Divisor
    n_lat: int = 64
    n_lon: int = 128
    eps: float = 0.05
    dt: float = 0.01
    t_max: float = 50.0
    stepper: str = "semi_implicit"
    renormalize_every: int = 1
    sample_every: float = 0.5
    snapshot_every: float = 0.0
    initial: str = "zero"
    bump_amplitude: float = 0.0
    seed: int = 0
    auto_stop: bool = True
    stop_rel: float = 2e-4
    stop_consecutive: int = 10
    ball_radius: float = 0.2
    axisymmetric: bool = False

    def __post_init__(self):
        if self.dt <= 0 or self.t_max <= 0:
            raise ValueError("dt and t_max must be positive")
        if self.stepper not in STEPPERS:
            raise ValueError(f"unknown stepper {self.stepper!r}")
        if self.initial not in INITIALS:
            raise ValueError(f"unknown initial condition {self.initial!r}")
        if self.renormalize_every < 1:
            raise ValueError("renormalize_every must be >= 1")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "n_lat", "n_lon", "eps", "dt", "t_max", "stepper", "renormalize_every",
            "sample_every", "snapshot_every", "initial", "bump_amplitude", "seed",
            "auto_stop", "stop_rel", "stop_consecutive", "ball_radius", "axisymmetric",
        )}
        d["divisor"] = {
            "weights": [float(w) for w in self.divisor.weights],
            "positions": self.divisor.positions.tolist(),
        } if self.divisor is not None else None
        return d


#: config file schema: ``key = value`` per line, '#' comments.  Unknown keys
#: are hard errors.  ``divisor`` is a path to a divisor JSON file, resolved
#: relative to the config file.
CONFIG_KEYS = {
    "divisor": str,
    "n_lat": int,
    "n_lon": int,
    "epsilon": float,
    "dt": float,
    "t_max": float,
    "stepper": str,
    "renormalize_every": int,
    "sample_every": float,
    "snapshot_every": float,
    "initial": str,
    "bump_amplitude": float,
    "seed": int,
    "auto_stop": bool,
    "stop_rel": float,
    "stop_consecutive": int,
    "ball_radius": float,
    "axisymmetric": bool,
}


def parse_config_text(text: str, base_dir: str = ".") -> FlowConfig:
    import os

    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in CONFIG_KEYS:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ValueError(f"config line {lineno}: duplicate key {key!r}")
        typ = CONFIG_KEYS[key]
        if typ is bool:
            if val.lower() not in ("true", "false"):
                raise ValueError(f"config line {lineno}: {key} must be true/false")
            raw[key] = val.lower() == "true"
        else:
            raw[key] = typ(val)
    if "divisor" not in raw:
        raise ValueError("config is missing the 'divisor' key")
    path = raw.pop("divisor")
    if not os.path.isabs(path):
        path = os.path.join(base_dir, path)
    with open(path) as fh:
        divisor = Divisor.from_json(fh.read())
    if "epsilon" in raw:
        raw["eps"] = raw.pop("epsilon")
    return FlowConfig(divisor=divisor, **raw)


def parse_config_file(path: str) -> FlowConfig:
    import os

    with open(path) as fh:
        return parse_config_text(fh.read(), base_dir=os.path.dirname(os.path.abspath(path)))


# ----------------------------------------------------------------------
# stepping
# ----------------------------------------------------------------------


class FlowError(RuntimeError):
    pass


def flow_rhs(state: geo.MetricState) -> np.ndarray:
    """du/dt = chi/2 - R_cone(u), with R_cone the smooth-part curvature.

    Away from the smoothed cone cores this is chi/2 - R(t) pointwise; at the
    cores the modeled Dirac masses are excluded from the dynamics, exactly as
    the conical flow equation lives on the punctured sphere.  Without the
    exclusion every eps > 0 state would be an ordinary smooth sphere metric
    and the flow would erase the cones entirely.
    """
    return 0.5 * state.background.chi() - geo.conical_curvature(state)


def flow_rhs_conformal(state: geo.MetricState) -> np.ndarray:
    """The algebraically equal form e^-u Lap_bg u + chi/2 - e^-u R_bg,cone."""
    bg = state.background
    a = np.exp(-state.u)
    r_bg = bg.R - (bg.cone_term if bg.cone_term is not None else 0.0)
    return a * geo.laplacian_bg(state.u, bg) + 0.5 * bg.chi() - a * r_bg


def cfl_limit(state: geo.MetricState) -> float:
    """Largest stable explicit step: CFL_SAFETY / max_i (L_ii / mass_i),
    from the Gershgorin bound 2 max(L_ii/mass_i) on the stiffness and the
    RK2 real-axis stability interval of length 2."""
    diag_l = state.grid.L.diagonal()
    lam = 2.0 * float(np.max(diag_l / state.mass))
    return CFL_SAFETY * 2.0 / lam


def step(state: geo.MetricState, dt: float, debug: bool = False) -> geo.MetricState:
    """One explicit RK2 (midpoint) step; rejects dt above the CFL limit."""
    limit = cfl_limit(state)
    if dt > limit:
        raise FlowError(f"dt={dt:.3e} violates the CFL bound {limit:.3e}")
    k1 = flow_rhs(state)
    if debug:
        alt = flow_rhs_conformal(state)
        if np.max(np.abs(k1 - alt)) > 1e-10 * max(1.0, np.max(np.abs(k1))):
            raise FlowError("gauge consistency violated between rhs forms")
    mid = geo.MetricState(state.background, state.u + 0.5 * dt * k1, state.t + 0.5 * dt)
    k2 = flow_rhs(mid)
    u = state.u + dt * k2
    if not np.all(np.isfinite(u)):
        raise FlowError("non-finite conformal factor after explicit step")
    return geo.MetricState(state.background, u, state.t + dt)


class _ImplicitStepper:
    """Backward-Euler diffusion solve (diag(d) + L) u = b with a cached LU.

    The diagonal d = mass / (dt e^-u) drifts slowly along the flow, so one
    factorization serves many steps as a preconditioner for iterative
    refinement; it is rebuilt when the drift or the refinement stalls.
    """

    def __init__(self, background: geo.BackgroundMetric):
        self.bg = background
        self.lu = None
        self.d_ref = None

    def _factor(self, d):
        self.lu = spla.splu((sp.diags(d) + self.bg.grid.L).tocsc())
        self.d_ref = d

    def solve(self, d, rhs):
        if self.lu is None or np.max(np.abs(np.log(d / self.d_ref))) > 0.3:
            self._factor(d)
        x = self.lu.solve(rhs)
        L = self.bg.grid.L
        norm = float(np.linalg.norm(rhs)) or 1.0
        for _ in range(12):
            r = rhs - (d * x + L @ x)
            if float(np.linalg.norm(r)) <= 1e-12 * norm:
                return x
            x = x + self.lu.solve(r)
        self._factor(d)
        x = self.lu.solve(rhs)
        r = rhs - (d * x + L @ x)
        return x + self.lu.solve(r)


def _semi_implicit_step(
    state: geo.MetricState, dt: float, stepper: _ImplicitStepper = None
) -> geo.MetricState:
    bg = state.background
    if stepper is None:
        stepper = _ImplicitStepper(bg)
    a = np.exp(-state.u)
    r_bg = bg.R - (bg.cone_term if bg.cone_term is not None else 0.0)
    d = bg.mass / (dt * a)
    rhs = d * (state.u + dt * (0.5 * bg.chi() - a * r_bg))
    u = stepper.solve(d, rhs)
    if not np.all(np.isfinite(u)):
        raise FlowError("non-finite conformal factor after implicit step")
    return geo.MetricState(bg, u, state.t + dt)


def renormalize(state: geo.MetricState):
    """Restore area 2 by the unique additive constant; returns
    (state, constant) with the constant reported, not silently absorbed."""
    area = state.area()
    c = math.log(2.0 / area)
    return geo.MetricState(state.background, state.u + c, state.t), c


# ----------------------------------------------------------------------
# traces
# ----------------------------------------------------------------------


@dataclass
class FlowTrace:
    times: np.ndarray
    columns: dict
    meta: dict = field(default_factory=dict)
    status: str = "completed"
    final_state: geo.MetricState = field(default=None, repr=False)

    def column_names(self):
        return list(self.columns.keys())

    def __getitem__(self, name):
        return self.columns[name]

    def to_csv(self, path: str) -> None:
        names = self.column_names()
        with open(path, "w") as fh:
            fh.write(",".join(["time"] + names) + "\n")
            for i, t in enumerate(self.times):
                row = [f"{t:.17g}"] + [f"{self.columns[c][i]:.17g}" for c in names]
                fh.write(",".join(row) + "\n")

    @classmethod
    def from_csv(cls, path: str) -> "FlowTrace":
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        times = data[:, 0]
        cols = {name: data[:, i + 1] for i, name in enumerate(header[1:])}
        return cls(times, cols)


def _relative_entropy(state, r_cone, chow_s):
    """Hamilton entropy of R - s relative to its equilibrium value.

    Subtracting 2 (rbar - s) log(rbar - s), with rbar the metric mean of the
    smooth-part curvature, removes the pure shift drift -ds/dt (log + 1) A,
    which for targets chi/2 < 1/e would otherwise raise the raw shifted
    entropy after the geometry has converged.  With no shift active this is
    Hamilton's N minus a constant.
    """
    w = r_cone - chow_s
    if np.any(w <= 0.0):
        bad = int(np.argmin(w))
        raise FlowError(f"R - s not positive at node {bad}")
    mean = geo.integrate(w, state) / 2.0
    return geo.integrate(w * np.log(w), state) - 2.0 * mean * math.log(mean)


def _sample_record(state, rp, chow_s, drift, config):
    bg = state.background
    R = geo.scalar_curvature(state)
    r_cone = geo.conical_curvature(state)
    rec = {
        "area": state.area(),
        "total_curvature": geo.integrate(R, state),
        "r_min": float(R.min()),
        "r_max": float(R.max()),
        "rcone_min": float(r_cone.min()),
        "rcone_max": float(r_cone.max()),
        "f_beta": fn.f_beta(state),
        "hamilton_entropy": _relative_entropy(state, r_cone, chow_s),
        "chow_s": chow_s,
        "w_normalized": fn.normalized_w(state, -rp.v),
        "soliton_residual": fn.soliton_residual(state, rp.v),
        "renorm_drift": drift,
    }
    k = len(state.grid.marked_points)
    if k:
        dmat = geo.pairwise_marked_distances(state)
        for i in range(k):
            for j in range(i + 1, k):
                rec[f"d_p{i + 1}_p{j + 1}"] = dmat[i, j]
        for i in range(k):
            rec[f"ball_ratio_p{i + 1}"] = diag.volume_ratio(
                state, state.grid.marked_points[i], config.ball_radius
            )
    rec["diameter"] = geo.diameter_estimate(state)
    return rec


def _initial_field(config: FlowConfig, grid: geo.SphereGrid, bg=None) -> np.ndarray:
    if config.initial == "zero":
        return np.zeros(grid.n)
    if config.initial == "soliton":
        # start on the closed-form soliton orbit of the divisor's weights
        from . import soliton as sol

        div = config.divisor
        if div is None or div.k not in (1, 2):
            raise ValueError("initial = soliton needs a 1- or 2-point divisor")
        w = div.weights_float()
        if div.k == 2:
            axis = div.positions[int(np.argmax(w))]
            prof = sol.soliton_profile(float(w.max()), float(w.min()))
        else:
            axis = div.positions[0]
            prof = sol.soliton_profile(float(w[0]), 0.0)
        return diag.profile_state(bg, prof, axis).u
    rng = np.random.default_rng(config.seed)
    center = rng.standard_normal(3)
    center /= np.linalg.norm(center)
    if config.axisymmetric:
        center = np.array([0.0, 0.0, math.copysign(1.0, center[2])])
    cosang = np.clip(grid.positions() @ center, -1.0, 1.0)
    ang2 = np.arccos(cosang) ** 2
    width = 0.5
    amp = config.bump_amplitude if config.bump_amplitude else 0.3
    return amp * np.exp(-ang2 / (2.0 * width * width))


def _run_loop(config: FlowConfig, grid: geo.SphereGrid) -> FlowTrace:
    bg = geo.background_metric(grid, config.divisor, config.eps)
    state = geo.make_state(bg, _initial_field(config, grid, bg))
    state, _ = renormalize(state)

    r0 = geo.conical_curvature(state)
    # Chow's shift is only needed when the smooth-part curvature is not
    # already positive; s = 0 solves the shift ODE and leaves N unshifted
    rmin0 = float(r0.min())
    s0 = 0.0 if rmin0 > 0.05 else min(-0.05, rmin0 - 0.05)
    half_chi = 0.5 * bg.chi()

    steps_per_sample = max(1, round(config.sample_every / config.dt))
    n_steps = int(round(config.t_max / config.dt))
    snap_every = (
        max(1, round(config.snapshot_every / config.dt)) if config.snapshot_every else 0
    )

    times, rows = [], []
    snapshots = []
    status = "completed"
    drift_last = 0.0
    calm = 0
    implicit = _ImplicitStepper(bg)

    def record():
        rp = fn.ricci_potential(state)
        s = fn.chow_shift(s0, state.t, half_chi)
        rows.append(_sample_record(state, rp, s, drift_last, config))
        times.append(state.t)

    record()
    try:
        for n in range(1, n_steps + 1):
            if config.stepper == "rk2":
                state = step(state, config.dt)
            else:
                state = _semi_implicit_step(state, config.dt, implicit)
            if n % config.renormalize_every == 0:
                state, drift_last = renormalize(state)
            if snap_every and n % snap_every == 0:
                snapshots.append((state.t, state.u.copy()))
            if n % steps_per_sample == 0 or n == n_steps:
                record()
                if config.auto_stop and len(rows) >= 2:
                    prev, cur = rows[-2], rows[-1]
                    keys = [k for k in cur if k not in ("chow_s", "renorm_drift", "area")]
                    quiet = all(
                        abs(cur[k] - prev[k]) <= config.stop_rel * max(1.0, abs(cur[k]))
                        for k in keys
                    )
                    calm = calm + 1 if quiet else 0
                    if calm >= config.stop_consecutive:
                        status = "auto_stopped"
                        break
    except FlowError as exc:
        status = f"failed: {exc}"

    columns = {k: np.array([r[k] for r in rows]) for k in rows[0]}
    trace = FlowTrace(np.array(times), columns, status=status, final_state=state)
    trace.meta = {
        "config": config.to_dict(),
        "chow_s0": s0,
        "snapshots": snapshots,
        "nudges": grid.nudges,
    }
    return trace


def run(config: FlowConfig) -> FlowTrace:
    """Integrate the 2-D flow; deterministic given the config (and seed)."""
    grid = geo.build_grid(config.n_lat, config.n_lon, config.divisor)
    return _run_loop(config, grid)


def run_axisymmetric(config: FlowConfig) -> FlowTrace:
    """1-D fast path in colatitude for <= 2 marked points at the poles.

    Uses the exact zonal aggregate of the 2-D stencil, so axisymmetric data
    produces the same monitors as the 2-D solver up to round-off.
    """
    grid = geo.build_axis_grid(config.n_lat, config.divisor)
    cfg = replace(config, axisymmetric=True, n_lon=1)
    return _run_loop(cfg, grid)
