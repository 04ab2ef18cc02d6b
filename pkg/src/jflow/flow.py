"""Explicit RK4 integration of the J-flow d(phi)/dt = c - 2 chi_phi ^ omega / chi_phi^2."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import NotInPChiError, PreconditionError, StiffnessError
from .functionals import check_normalized
from .geometry import (
    HermitianFormField,
    ScalarField,
    ddc,
    min_eigenvalue_field,
    topological_constant,
    wedge11,
    wedge2,
)

log = logging.getLogger(__name__)

EPS = np.finfo(float).eps


class Status(str, Enum):
    CONVERGED = "CONVERGED"
    MAX_TIME = "MAX_TIME"
    POSITIVITY_FLOOR = "POSITIVITY_FLOOR"


def _require_positive(chi_phi: HermitianFormField) -> ScalarField:
    lam = min_eigenvalue_field(chi_phi)
    if lam.min() <= 0:
        node = np.unravel_index(np.argmin(lam.values), lam.values.shape)
        raise NotInPChiError(f"chi + dd^c phi is not positive at node {node} (min eig {lam.min():.3e})", node)
    return lam


def flow_rhs(phi: ScalarField, chi: HermitianFormField, omega: HermitianFormField, c: float) -> ScalarField:
    chi_phi = chi + ddc(phi)
    _require_positive(chi_phi)
    return c - 2.0 * wedge11(chi_phi, omega) / wedge2(chi_phi)


def rhs_rewrite_check(phi: ScalarField, chi: HermitianFormField, omega: HermitianFormField) -> float:
    """Sup difference between the flow speed and its Monge-Ampere rewrite (c = 1).

    ((chi_phi - omega)^2 - omega^2) / chi_phi^2 must agree with
    1 - 2 chi_phi ^ omega / chi_phi^2 pointwise.
    """
    chi_phi = chi + ddc(phi)
    w2 = wedge2(chi_phi).values
    direct = 1.0 - 2.0 * wedge11(chi_phi, omega).values / w2
    rewritten = (wedge2(chi_phi - omega).values - wedge2(omega).values) / w2
    return float(np.max(np.abs(direct - rewritten)))


def stationarity_residual(state: "FlowState", omega: HermitianFormField, c: float) -> float:
    """sup |c chi_phi^2 - 2 chi_phi ^ omega| / chi_phi^2."""
    w2 = wedge2(state.chi_phi).values
    return float(np.max(np.abs(c * w2 - 2.0 * wedge11(state.chi_phi, omega).values) / w2))


@dataclass
class FlowState:
    phi: ScalarField
    time: float
    chi_phi: HermitianFormField
    monitors: dict = field(default_factory=dict)
    # det(chi_phi) and 2 chi_phi ^ omega / chi_phi^2 arrays, filled by JFlow.
    cache: dict = field(default_factory=dict, repr=False)


class JFlow:
    """J-flow for fixed background forms ``chi`` and ``omega``.

    ``c`` defaults to the topological constant of the backgrounds.  The inner
    loop works on raw node arrays; public methods return fields.
    """

    def __init__(self, chi: HermitianFormField, omega: HermitianFormField, c: float | None = None):
        if chi.grid != omega.grid:
            raise PreconditionError("chi and omega live on different grids")
        self.chi = chi
        self.omega = omega
        self.grid = chi.grid
        self.c = topological_constant(chi, omega) if c is None else float(c)
        self._complex = np.iscomplexobj(chi.a12) or np.iscomplexobj(omega.a12) or self.grid.ndim == 4

    def _form(self, values: np.ndarray):
        """(a11, a22, a12, det, 2 chi_phi^omega / chi_phi^2) for chi + dd^c of raw values."""
        comps = self.grid.ddc_components(values)
        chi, om = self.chi, self.omega
        a11 = chi.a11 + comps[0]
        a22 = chi.a22 + comps[1]
        if self._complex:
            a12 = chi.a12 + (comps[2] + 1j * comps[3] if len(comps) == 4 else comps[2])
            det = a11 * a22 - (a12.real ** 2 + a12.imag ** 2)
            cross = a12.real * np.real(om.a12) + a12.imag * np.imag(om.a12)
        else:
            a12 = chi.a12 + comps[2]
            det = a11 * a22 - a12 * a12
            cross = a12 * om.a12
        ratio = (a11 * om.a22 + a22 * om.a11 - 2.0 * cross) / det
        return a11, a22, a12, det, ratio

    def _speed_values(self, values: np.ndarray) -> np.ndarray:
        a11, _, _, det, ratio = self._form(values)
        if a11.min() <= 0 or det.min() <= 0:
            bad = np.minimum(a11, det)
            node = np.unravel_index(np.argmin(bad), bad.shape)
            raise NotInPChiError(f"chi + dd^c phi is not positive at node {node}", node)
        return self.c - ratio

    def _hermitian(self, phi: ScalarField, a11, a22, a12) -> HermitianFormField:
        pot = phi if self.chi.potential is None else self.chi.potential + phi
        return HermitianFormField(self.grid, a11, a22, a12, self.chi.constant.copy(), pot)

    def chi_phi(self, phi: ScalarField) -> HermitianFormField:
        return self.chi + ddc(phi)

    def speed(self, chi_phi: HermitianFormField) -> ScalarField:
        """Flow speed c - 2 chi_phi ^ omega / chi_phi^2 for a given chi_phi (no positivity check)."""
        return self.c - 2.0 * wedge11(chi_phi, self.omega) / wedge2(chi_phi)

    def rhs(self, phi: ScalarField) -> ScalarField:
        return ScalarField(self.grid, self._speed_values(phi.values), check=False)

    def state(self, phi: ScalarField, time: float = 0.0) -> FlowState:
        chi_phi = self.chi_phi(phi)
        lam = _require_positive(chi_phi)
        det = 0.5 * wedge2(chi_phi).values
        ratio = wedge11(chi_phi, self.omega).values / det
        return FlowState(phi, time, chi_phi,
                         {"sup_abs_rhs": float(np.max(np.abs(self.c - ratio))), "min_eig_chi_phi": lam.min()},
                         {"det": det, "ratio": ratio})

    def cfl_dt(self, state: FlowState, cfl_factor: float = 0.2) -> float:
        """cfl * spacing^2 * min eig(chi_phi) / max tr_{chi_phi} omega."""
        cp = state.chi_phi
        tr = state.cache.get("ratio")
        if tr is None:
            det = cp.a11 * cp.a22 - np.abs(cp.a12) ** 2
            tr = wedge11(cp, self.omega).values / det
        lam = state.monitors.get("min_eig_chi_phi")
        if lam is None:
            lam = min_eigenvalue_field(cp).min()
        return cfl_factor * self.grid.spacing ** 2 * lam / float(np.max(tr))

    def _tentative(self, phi: np.ndarray, k1: np.ndarray, dt: float) -> np.ndarray:
        k2 = self._speed_values(phi + (0.5 * dt) * k1)
        k3 = self._speed_values(phi + (0.5 * dt) * k2)
        k4 = self._speed_values(phi + dt * k3)
        return phi + (dt / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)

    def step(self, state: FlowState, dt: float, positivity_floor: float = 0.0,
             max_halvings: int = 20, k1: ScalarField | None = None) -> FlowState:
        """One RK4 step, halving ``dt`` while the result leaves {min eig >= positivity_floor}."""
        if not dt > 0:
            raise PreconditionError(f"dt must be positive, got {dt}")
        if k1 is not None:
            k1v = k1.values
        elif "ratio" in state.cache:
            k1v = self.c - state.cache["ratio"]
        else:
            k1v = self.speed(state.chi_phi).values
        node = None
        for attempt in range(max_halvings + 1):
            if attempt:
                dt *= 0.5
            try:
                values = self._tentative(state.phi.values, k1v, dt)
            except NotInPChiError as exc:
                values, node = None, exc.node
            if values is not None:
                a11, a22, a12, det, ratio = self._form(values)
                lam = 0.5 * (a11 + a22) - np.sqrt(0.25 * (a11 - a22) ** 2 + np.abs(a12) ** 2)
                lam_min = float(lam.min())
                if lam_min > 0 and lam_min >= positivity_floor:
                    phi = ScalarField(self.grid, values, check=False)
                    return FlowState(phi, state.time + dt, self._hermitian(phi, a11, a22, a12),
                                     {"min_eig_chi_phi": lam_min, "dt_current": dt},
                                     {"det": det, "ratio": ratio})
                node = np.unravel_index(np.argmin(lam), lam.shape)
        raise StiffnessError(f"time step underflow after {max_halvings} halvings at t={state.time:.6g}; "
                             f"positivity lost at node {node}", node=node, dt=dt)


@dataclass
class FlowConfig:
    cfl_factor: float = 0.2
    tol_stationary: float = 1e-9
    t_max: float = 1e4
    # 0 records every step
    sample_interval: float = 0.05
    # Run stops with POSITIVITY_FLOOR once min eig drops below this fraction of its initial value.
    positivity_floor_fraction: float = 0.1
    # Step rejection threshold as a fraction of the initial min eig.
    hard_floor_fraction: float = 1e-3
    initial_margin_fraction: float = 0.05
    monotonicity_slack: float = 1e-8
    max_halvings: int = 20
    max_steps: int | None = None
    keep_snapshots: bool = True


@dataclass
class Trajectory:
    times: list = field(default_factory=list)
    monitors: dict = field(default_factory=dict)
    snapshots: list = field(default_factory=list)
    status: Status | None = None
    warnings: list = field(default_factory=list)
    steps: int = 0
    final_state: FlowState | None = None
    # Largest single-step increase of J, over all steps (not just samples).
    max_J_increase: float = 0.0
    initial_min_eig: float = float("nan")

    def series(self, name: str) -> np.ndarray:
        return np.asarray(self.monitors[name], dtype=float)

    CSV_COLUMNS = ("time", "I", "J", "sup_abs_rhs", "min_eig", "sup_abs_phi", "dt")

    def csv_rows(self):
        cols = list(self.CSV_COLUMNS)
        if "H_eps" in self.monitors:
            cols.append("H_eps")
        rows = []
        for i, t in enumerate(self.times):
            row = {"time": t}
            for col in cols[1:]:
                row[col] = self.monitors[col][i]
            rows.append(row)
        return cols, rows


def _functionals(state: FlowState, chi: HermitianFormField, w2_chi, w11_chi_omega):
    """(I, J, wedge2(chi_phi)) from the arrays cached on ``state``."""
    det, ratio = state.cache["det"], state.cache["ratio"]
    w2 = 2.0 * det
    phi = state.phi.values
    cubic = w2 + wedge11(state.chi_phi, chi).values + w2_chi
    i_value = float(np.mean(phi * cubic)) / 3.0
    linear = ratio * det + w11_chi_omega
    j_value = float(np.mean(phi * linear)) - i_value
    return i_value, j_value, w2


def run_flow(flow: JFlow, phi0: ScalarField, config: FlowConfig | None = None,
             reference: ScalarField | None = None, epsilon: float | None = None) -> Trajectory:
    """Integrate from ``phi0`` until stationary, ``t_max`` or the positivity floor.

    ``reference`` (an elliptic solution) enables the C^0 distance monitor and,
    together with ``epsilon``, the H_eps = sup(phi - psi) - eps t monitor.
    """
    cfg = config or FlowConfig()
    check_normalized(flow.chi, flow.omega)
    chi, omega = flow.chi, flow.omega
    lam_chi = min_eigenvalue_field(chi).min()
    state = flow.state(phi0, 0.0)
    lam0 = state.monitors["min_eig_chi_phi"]
    if lam0 < cfg.initial_margin_fraction * lam_chi:
        raise PreconditionError(f"initial data too close to the boundary of P_chi: min eig {lam0:.4g} "
                                f"< {cfg.initial_margin_fraction} x {lam_chi:.4g}")
    soft_floor = cfg.positivity_floor_fraction * lam0
    hard_floor = cfg.hard_floor_fraction * lam0
    w2_chi = wedge2(chi).values
    w11_chi_omega = wedge11(chi, omega).values

    traj = Trajectory(initial_min_eig=lam0)
    names = ["I", "J", "sup_abs_rhs", "min_eig", "sup_abs_phi", "dt", "dissipation"]
    if reference is not None:
        names.append("dist_ref")
        if epsilon is not None:
            names.append("H_eps")
    traj.monitors = {name: [] for name in names}

    ref_centered = None if reference is None else reference.values - reference.mean()

    def record(st, speed, i_val, j_val, dt, dissipated):
        traj.times.append(st.time)
        m = traj.monitors
        m["I"].append(i_val)
        m["J"].append(j_val)
        m["sup_abs_rhs"].append(speed.sup_norm())
        m["min_eig"].append(st.monitors["min_eig_chi_phi"])
        m["sup_abs_phi"].append(st.phi.sup_norm())
        m["dt"].append(dt)
        m["dissipation"].append(dissipated)
        if reference is not None:
            m["dist_ref"].append(float(np.max(np.abs(st.phi.values - st.phi.mean() - ref_centered))))
            if epsilon is not None:
                m["H_eps"].append(float(np.max(st.phi.values - reference.values)) - epsilon * st.time)
        if cfg.keep_snapshots:
            traj.snapshots.append((st.time, st.phi))

    speed = ScalarField(flow.grid, flow.c - state.cache["ratio"], check=False)
    i_val, j_val, w2 = _functionals(state, chi, w2_chi, w11_chi_omega)
    power = float(np.mean(speed.values ** 2 * w2))
    dissipated = 0.0
    record(state, speed, i_val, j_val, 0.0, 0.0)
    next_sample = cfg.sample_interval

    while True:
        sup_rhs = speed.sup_norm()
        if sup_rhs < cfg.tol_stationary:
            traj.status = Status.CONVERGED
            break
        if state.time >= cfg.t_max:
            traj.status = Status.MAX_TIME
            break
        if cfg.max_steps is not None and traj.steps >= cfg.max_steps:
            traj.status = Status.MAX_TIME
            traj.warnings.append(f"stopped after max_steps={cfg.max_steps}")
            break
        if state.monitors["min_eig_chi_phi"] < soft_floor:
            traj.status = Status.POSITIVITY_FLOOR
            break
        dt = min(flow.cfl_dt(state, cfg.cfl_factor), cfg.t_max - state.time)
        new = flow.step(state, dt, hard_floor, cfg.max_halvings, k1=speed)
        dt = new.monitors["dt_current"]
        new_speed = ScalarField(flow.grid, flow.c - new.cache["ratio"], check=False)
        new_i, new_j, w2 = _functionals(new, chi, w2_chi, w11_chi_omega)
        new_power = float(np.mean(new_speed.values ** 2 * w2))
        dissipated += 0.5 * dt * (power + new_power)
        increase = new_j - j_val
        if increase > traj.max_J_increase:
            traj.max_J_increase = increase
        if increase > cfg.monotonicity_slack:
            traj.warnings.append(f"J increased by {increase:.3e} at t={new.time:.6g} (monotonicity violation)")
        traj.steps += 1
        state, speed, i_val, j_val, power = new, new_speed, new_i, new_j, new_power
        state.monitors["sup_abs_rhs"] = speed.sup_norm()
        if state.time >= next_sample - 1e-15 or cfg.sample_interval <= 0:
            record(state, speed, i_val, j_val, dt, dissipated)
            next_sample = state.time + cfg.sample_interval

    if traj.times[-1] != state.time:
        record(state, speed, i_val, j_val, state.monitors.get("dt_current", 0.0), dissipated)
    state.monitors.update({"I": i_val, "J": j_val, "sup_abs_rhs": speed.sup_norm()})
    traj.final_state = state
    log.info("flow finished: %s after %d steps at t=%.4g", traj.status.value, traj.steps, state.time)
    return traj
