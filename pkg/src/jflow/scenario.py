"""Declarative scenarios: parsing, validation and stage orchestration.

A scenario is a YAML document with nested sections.  Lengths are measured in
torus periods, so every coordinate runs over [0, 1).  See ``docs/`` for
annotated examples.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .elliptic import (
    DEFAULT_SCHEDULE,
    DegeneracySurrogate,
    EllipticProblem,
    comparison_H_epsilon,
    solve_degenerate_family,
    solve_ma_newton,
)
from .errors import ConfigError, GridMismatchError, JFlowError, StageError
from .fieldio import FieldFormatError, read_field, write_field
from .flow import FlowConfig, JFlow, Status, run_flow
from .functionals import functional_I, functional_J, gradient_check
from .geometry import (
    Grid,
    HermitianFormField,
    Mode,
    ScalarField,
    ddc,
    integrate,
    min_eigenvalue_field,
    topological_constant,
    wedge2,
)

log = logging.getLogger(__name__)

STAGES = ("elliptic", "flow", "compare")
FIELD_KINDS = ("zero", "constant", "fourier", "random", "file")
ELLIPTIC_MODES = ("auto", "direct", "family")
SNAPSHOT_POLICIES = ("none", "final", "all")
NORMALIZATION_TOL = 1e-12
HYPOTHESIS_TOL = 1e-10

# Seed streams, so adding a random field never reshuffles another one.
_STREAMS = {"omega": 1, "chi": 2, "initial_phi": 3, "gradient_check": 4, "rhs": 5, "surrogate": 6}

DEFAULTS = {
    "name": "scenario",
    "seed": 0,
    "stages": ["elliptic", "flow", "compare"],
    "grid": {"mode": "reduced", "resolution": 64},
    "omega": {"matrix": [[1.0, 0.0], [0.0, 1.0]], "potential": None},
    "chi": {"matrix": [[2.0, 0.0], [0.0, 2.0]], "potential": None},
    "auto_normalize_c": False,
    "initial_phi": {"kind": "zero"},
    "flow": {
        "cfl_factor": 0.2,
        "tol_stationary": 1e-9,
        "t_max": 1e4,
        "sample_interval": 0.05,
        "positivity_floor_fraction": 0.1,
        "initial_margin_fraction": 0.05,
        "monotonicity_slack": 1e-8,
        "conservation_tol": 1e-6,
    },
    "elliptic": {
        "mode": "auto",
        "delta_schedule": list(DEFAULT_SCHEDULE),
        "tol_newton": 1e-11,
        "max_iter": 100,
        "rhs": None,
    },
    "diagnostics": {
        "h_epsilon": {"enabled": False, "epsilons": [1e-2, 1e-3], "slack": 1e-7},
        "trace": {"enabled": False, "surrogate": "alpha_min_eig", "threshold": 0.1, "A": 1.0, "a": 1.0,
                  "max_variation": 0.2},
        "family": {"enabled": False, "c_delta_tol": 1e-12, "band": 1.0, "increment_floor": 1e-10},
        "gradient_check": {"enabled": False, "directions": 20, "h": 1e-5, "tolerance": 1e-6},
    },
    "compare": {"tolerance": 1e-6},
    "output": {"directory": None, "snapshots": "final"},
}

# Sub-trees whose contents are free-form and validated by their own builders.
_OPAQUE = {("omega", "matrix"), ("chi", "matrix"), ("omega", "potential"), ("chi", "potential"),
           ("initial_phi",), ("elliptic", "rhs"), ("elliptic", "delta_schedule"),
           ("diagnostics", "h_epsilon", "epsilons"), ("diagnostics", "trace", "surrogate"), ("stages",)}


def _merge(defaults, given, path, unknown, type_errors):
    if not isinstance(given, dict):
        type_errors.append(f"{'.'.join(path) or '<root>'}: expected a mapping, got {type(given).__name__}")
        return copy.deepcopy(defaults)
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        sub = path + (str(key),)
        if key not in defaults:
            unknown.append(".".join(sub))
            continue
        default = defaults[key]
        if sub in _OPAQUE or default is None:
            out[key] = value
        elif isinstance(default, dict):
            out[key] = _merge(default, value if value is not None else {}, sub, unknown, type_errors)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                type_errors.append(f"{'.'.join(sub)}: expected true/false, got {value!r}")
            out[key] = value
        elif isinstance(default, (int, float)):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                type_errors.append(f"{'.'.join(sub)}: expected a number, got {value!r}")
            elif isinstance(default, int) and not isinstance(default, bool) and not float(value).is_integer():
                type_errors.append(f"{'.'.join(sub)}: expected an integer, got {value!r}")
            out[key] = value
        else:
            out[key] = value
    return out


def apply_override(data: dict, override: str) -> None:
    """Apply a ``dotted.key=value`` override in place; the value is parsed as YAML."""
    if "=" not in override:
        raise ConfigError([f"override {override!r} is not of the form key=value"])
    key, raw = override.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError([f"override {override!r} has an empty key segment"])
    node = data
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            node[part] = {}
        node = node[part]
    node[parts[-1]] = yaml.safe_load(raw)


def _matrix(spec, where, violations):
    try:
        rows = [[complex(*e) if isinstance(e, (list, tuple)) else complex(e) for e in row] for row in spec]
        m = np.array(rows, dtype=complex)
        if m.shape != (2, 2):
            raise ValueError(f"shape {m.shape}")
        if abs(m[0, 0].imag) > 0 or abs(m[1, 1].imag) > 0 or abs(m[0, 1] - np.conj(m[1, 0])) > 1e-14:
            raise ValueError("not Hermitian")
    except (TypeError, ValueError) as exc:
        violations.append(f"{where}: expected a Hermitian 2x2 matrix with entries x or [re, im] ({exc})")
        return None
    return m


def build_field(spec, grid: Grid, seed: int, stream: str, base_dir: Path, where: str, violations) -> ScalarField | None:
    """Turn a field spec (zero, constant, fourier, random or file) into a ScalarField."""
    if spec is None:
        return None
    if not isinstance(spec, dict) or spec.get("kind") not in FIELD_KINDS:
        violations.append(f"{where}: expected a mapping with kind in {FIELD_KINDS}")
        return None
    kind = spec["kind"]
    allowed = {"zero": {"kind"}, "constant": {"kind", "value"}, "fourier": {"kind", "modes", "constant"},
               "random": {"kind", "band", "amplitude"}, "file": {"kind", "path"}}[kind]
    extra = sorted(set(spec) - allowed)
    if extra:
        violations.append(f"{where}: keys {extra} not allowed for kind {kind}")
        return None
    try:
        if kind == "zero":
            return grid.zeros()
        if kind == "constant":
            return grid.constant(float(spec.get("value", 0.0)))
        if kind == "fourier":
            return grid.fourier(spec.get("modes") or []) + float(spec.get("constant", 0.0))
        if kind == "random":
            rng = np.random.default_rng([int(seed), _STREAMS[stream]])
            return grid.random_potential(rng, spec.get("band"), float(spec.get("amplitude", 0.01)))
        path = Path(spec["path"])
        if not path.is_absolute():
            path = base_dir / path
        phi = read_field(path)
        if phi.grid != grid:
            violations.append(f"{where}: file grid {phi.grid} differs from scenario grid {grid}")
            return None
        return phi
    except (KeyError, TypeError, ValueError, OSError, FieldFormatError, JFlowError) as exc:
        violations.append(f"{where}: {exc}")
        return None


@dataclass
class ScenarioConfig:
    """A validated scenario together with the objects built from it."""

    data: dict
    base_dir: Path
    grid: Grid
    omega: HermitianFormField
    chi: HermitianFormField
    phi0: ScalarField | None
    c_raw: float
    elliptic_mode: str
    rhs: ScalarField | None
    surrogate: DegeneracySurrogate | None
    warnings: list = field(default_factory=list)

    @property
    def name(self) -> str:
        return str(self.data["name"])

    @property
    def stages(self) -> list:
        return list(self.data["stages"])

    @property
    def alpha(self) -> HermitianFormField:
        return self.chi - self.omega

    @property
    def scenario_hash(self) -> str:
        text = json.dumps(self.data, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(text.encode()).hexdigest()

    def flow_config(self, keep_snapshots: bool = True) -> FlowConfig:
        f = self.data["flow"]
        return FlowConfig(cfl_factor=float(f["cfl_factor"]), tol_stationary=float(f["tol_stationary"]),
                          t_max=float(f["t_max"]), sample_interval=float(f["sample_interval"]),
                          positivity_floor_fraction=float(f["positivity_floor_fraction"]),
                          initial_margin_fraction=float(f["initial_margin_fraction"]),
                          monotonicity_slack=float(f["monotonicity_slack"]), keep_snapshots=keep_snapshots)

    def diagnostic(self, name: str) -> dict:
        return self.data["diagnostics"][name]


def _check_sections(data, violations):
    stages = data["stages"]
    if not isinstance(stages, list) or not stages or any(s not in STAGES for s in stages):
        violations.append(f"stages: expected a non-empty list drawn from {STAGES}, got {stages!r}")
    elif len(set(stages)) != len(stages):
        violations.append("stages: duplicate entries")
    elif "compare" in stages and not {"elliptic", "flow"} <= set(stages):
        violations.append("stages: compare needs both the elliptic and the flow stage")
    f = data["flow"]
    for key in ("cfl_factor", "tol_stationary", "t_max"):
        if isinstance(f[key], (int, float)) and not f[key] > 0:
            violations.append(f"flow.{key} must be positive, got {f[key]}")
    if isinstance(f["sample_interval"], (int, float)) and f["sample_interval"] < 0:
        violations.append(f"flow.sample_interval must be >= 0, got {f['sample_interval']}")
    e = data["elliptic"]
    if e["mode"] not in ELLIPTIC_MODES:
        violations.append(f"elliptic.mode must be one of {ELLIPTIC_MODES}, got {e['mode']!r}")
    sched = e["delta_schedule"]
    try:
        sched = [float(d) for d in sched]
        if not sched or any(d <= 0 for d in sched) or any(b >= a for a, b in zip(sched, sched[1:])):
            raise ValueError
    except (TypeError, ValueError):
        violations.append("elliptic.delta_schedule must be a non-empty strictly decreasing list of positive numbers")
    if isinstance(e["tol_newton"], (int, float)) and not e["tol_newton"] > 0:
        violations.append("elliptic.tol_newton must be positive")
    eps = data["diagnostics"]["h_epsilon"]["epsilons"]
    if not isinstance(eps, list) or not eps or any(
            isinstance(x, bool) or not isinstance(x, (int, float)) or x <= 0 for x in eps):
        violations.append("diagnostics.h_epsilon.epsilons must be a non-empty list of positive numbers")
    tr = data["diagnostics"]["trace"]
    if isinstance(tr["threshold"], (int, float)) and not 0 <= tr["threshold"] < 1:
        violations.append("diagnostics.trace.threshold must lie in [0, 1)")
    if data["output"]["snapshots"] not in SNAPSHOT_POLICIES:
        violations.append(f"output.snapshots must be one of {SNAPSHOT_POLICIES}")
    if data["diagnostics"]["gradient_check"]["directions"] < 1:
        violations.append("diagnostics.gradient_check.directions must be >= 1")


def _build(data: dict, base_dir: Path, violations: list) -> ScenarioConfig | None:
    _check_sections(data, violations)
    g = data["grid"]
    try:
        grid = Grid(Mode(g["mode"]), int(g["resolution"]))
    except (ValueError, TypeError) as exc:
        violations.append(f"grid: {exc}")
        return None
    seed = data["seed"]
    forms = {}
    for name in ("omega", "chi"):
        m = _matrix(data[name]["matrix"], f"{name}.matrix", violations)
        pot = build_field(data[name]["potential"], grid, seed, name, base_dir, f"{name}.potential", violations)
        if m is not None:
            base = HermitianFormField.from_constant(grid, m)
            forms[name] = base if pot is None else base + ddc(pot)
    if len(forms) < 2:
        return None
    omega, chi = forms["omega"], forms["chi"]
    if min_eigenvalue_field(omega).min() <= 0:
        violations.append("omega must be positive definite at every node")
        return None
    try:
        c_raw = topological_constant(chi, omega)
    except JFlowError as exc:
        violations.append(f"chi: {exc}")
        return None
    if data["auto_normalize_c"]:
        chi = c_raw * chi
    c = topological_constant(chi, omega)
    if abs(c - 1.0) > NORMALIZATION_TOL:
        violations.append(f"topological constant is {c:.15g}, not 1 (set auto_normalize_c or rescale chi)")
    gap = min_eigenvalue_field(chi - omega).min()
    if gap < -HYPOTHESIS_TOL:
        violations.append(f"chi - omega must be semipositive: min eig {gap:.6g} < {-HYPOTHESIS_TOL:g}")

    phi0 = build_field(data["initial_phi"], grid, seed, "initial_phi", base_dir, "initial_phi", violations)
    if phi0 is not None:
        lam_chi = min_eigenvalue_field(chi).min()
        lam0 = min_eigenvalue_field(chi + ddc(phi0)).min()
        margin = data["flow"]["initial_margin_fraction"]
        if lam_chi <= 0:
            violations.append(f"chi must be positive definite, min eig {lam_chi:.6g}")
        elif lam0 < margin * lam_chi:
            violations.append(f"initial_phi leaves P_chi margin: min eig of chi + dd^c phi0 is {lam0:.6g}, "
                              f"needs >= {margin} x {lam_chi:.6g}")

    rhs = build_field(data["elliptic"]["rhs"], grid, seed, "rhs", base_dir, "elliptic.rhs", violations)
    if rhs is not None:
        if rhs.min() <= 0:
            violations.append("elliptic.rhs must be strictly positive")
        if "compare" in data["stages"] and np.ptp(rhs.values) > 0:
            violations.append("compare needs a constant elliptic.rhs: the flow limit solves the f = 1 equation")

    alpha = chi - omega
    mode = data["elliptic"]["mode"]
    if mode == "auto":
        mode = "direct" if min_eigenvalue_field(alpha).min() > 1e-8 else "family"

    surrogate = None
    tr = data["diagnostics"]["trace"]
    fam = data["diagnostics"]["family"]
    if (tr["enabled"] or fam["enabled"]) and mode != "family":
        violations.append("diagnostics.trace and diagnostics.family need the delta family (elliptic.mode family)")
    if (tr["enabled"] or fam["enabled"]) and "elliptic" not in data["stages"]:
        violations.append("diagnostics.trace and diagnostics.family need the elliptic stage")
    if tr["enabled"]:
        if tr["surrogate"] == "alpha_min_eig":
            w = min_eigenvalue_field(alpha)
            weight = ScalarField(grid, np.clip(w.values, 0.0, None) / max(w.max(), 1e-300))
        else:
            weight = build_field(tr["surrogate"], grid, seed, "surrogate", base_dir, "diagnostics.trace.surrogate",
                                 violations)
        if weight is not None:
            try:
                surrogate = DegeneracySurrogate(weight, float(tr["threshold"]))
            except (JFlowError, ValueError) as exc:
                violations.append(f"diagnostics.trace.surrogate: {exc}")
    if data["diagnostics"]["h_epsilon"]["enabled"] and not {"elliptic", "flow"} <= set(data["stages"]):
        violations.append("diagnostics.h_epsilon needs both the elliptic and the flow stage")
    if "flow" in data["stages"] and data["initial_phi"] is None:
        violations.append("the flow stage needs initial_phi")
    if "elliptic" in data["stages"] and mode == "direct" and min_eigenvalue_field(alpha).min() <= 0:
        violations.append("elliptic.mode direct needs chi - omega positive definite; use the family mode")

    return ScenarioConfig(data, base_dir, grid, omega, chi, phi0, c_raw, mode, rhs, surrogate)


def load_scenario(data: dict, base_dir=".", strict: bool = True, overrides=()) -> ScenarioConfig:
    """Validate an already-parsed scenario mapping.

    Raises ConfigError carrying every violation found.
    """
    data = copy.deepcopy(data) if data is not None else {}
    violations = []
    for ov in overrides:
        try:
            apply_override(data, ov)
        except ConfigError as exc:
            violations.extend(exc.violations)
    unknown, type_errors = [], []
    merged = _merge(DEFAULTS, data, (), unknown, type_errors)
    violations.extend(type_errors)
    warnings = []
    if unknown:
        msg = f"unknown keys: {', '.join(unknown)}"
        (violations if strict else warnings).append(msg)
    if type_errors:
        raise ConfigError(violations)
    config = _build(merged, Path(base_dir), violations)
    if violations or config is None:
        raise ConfigError(violations or ["scenario could not be built"])
    config.warnings = warnings
    return config


def parse_scenario(path, strict: bool = True, overrides=()) -> ScenarioConfig:
    """Read and validate a YAML scenario file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc}"]) from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not valid YAML: {exc}"]) from exc
    return load_scenario(data, path.parent, strict, overrides)


@dataclass
class LimitComparison:
    sup_difference: float
    std_difference: float
    I_flow: float | None
    I_elliptic: float | None
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.sup_difference <= self.tolerance

    def as_dict(self) -> dict:
        return {"sup_difference": self.sup_difference, "std_difference": self.std_difference,
                "I_flow": self.I_flow, "I_elliptic": self.I_elliptic, "tolerance": self.tolerance,
                "passed": self.passed}


def compare_limits(flow_phi: ScalarField, psi: ScalarField, chi: HermitianFormField | None = None,
                   tolerance: float = 1e-6) -> LimitComparison:
    """Compare two potentials up to an additive constant (both are mean-aligned first)."""
    if flow_phi.grid != psi.grid:
        raise GridMismatchError(f"{flow_phi.grid} vs {psi.grid}")
    diff = flow_phi.values - flow_phi.mean() - (psi.values - psi.mean())
    i_flow = i_ell = None
    if chi is not None:
        i_flow, i_ell = functional_I(flow_phi, chi), functional_I(psi, chi)
    return LimitComparison(float(np.max(np.abs(diff))), float(np.std(diff)), i_flow, i_ell, tolerance)


@dataclass
class RunSummary:
    scenario: str
    name: str
    status: str
    I0: float | None = None
    I_end: float | None = None
    J0: float | None = None
    J_end: float | None = None
    residual: float | None = None
    verdicts: dict = field(default_factory=dict)
    # Kept out of summary.json so that reruns produce identical files.
    wall_clock: float = 0.0

    @property
    def passed(self) -> bool:
        return all(v["passed"] for v in self.verdicts.values())

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 1

    def as_json(self) -> dict:
        return {"scenario": self.scenario, "name": self.name, "status": self.status, "I0": self.I0,
                "I_end": self.I_end, "J0": self.J0, "J_end": self.J_end, "residual": self.residual,
                "verdicts": self.verdicts, "passed": self.passed}


def _verdict(passed, **values) -> dict:
    out = {"passed": bool(passed)}
    out.update({k: (float(v) if isinstance(v, (np.floating, np.integer)) else v) for k, v in values.items()})
    return out


def _run_elliptic(config: ScenarioConfig, summary: RunSummary):
    e = config.data["elliptic"]
    tol, max_iter = float(e["tol_newton"]), int(e["max_iter"])
    alpha, omega = config.alpha, config.omega
    family = None
    if config.elliptic_mode == "direct":
        solution = solve_ma_newton(EllipticProblem(alpha, omega, 0.0, config.rhs), tol=tol, max_iter=max_iter)
    else:
        tr = config.diagnostic("trace")
        solution, family = solve_degenerate_family(alpha, omega, e["delta_schedule"], config.rhs,
                                                   config.surrogate, float(tr["A"]), float(tr["a"]),
                                                   tol=tol, max_iter=max_iter)
    summary.residual = solution.residual_sup
    summary.verdicts["elliptic_residual"] = _verdict(solution.residual_sup <= tol, residual=solution.residual_sup,
                                                     tolerance=tol, iterations=solution.newton_iterations)
    if family is not None:
        _family_verdicts(config, family, summary)
    return solution, family


def _family_verdicts(config: ScenarioConfig, family, summary: RunSummary):
    fam = config.diagnostic("family")
    if fam["enabled"]:
        closed = [_closed_form_c_delta(config, r.delta) for r in family.records]
        errs = [abs(r.c_delta - c) for r, c in zip(family.records, closed)]
        tol = float(fam["c_delta_tol"])
        summary.verdicts["c_delta_closed_form"] = _verdict(max(errs) <= tol, max_error=max(errs), tolerance=tol)
        sups = family.series("sup_psi")
        band = float(fam["band"])
        summary.verdicts["sup_psi_band"] = _verdict(np.ptp(sups) <= band, spread=float(np.ptp(sups)), band=band)
        inc = family.series("cauchy_increment")[1:]
        floor = float(fam["increment_floor"])
        rises = np.diff(inc) if inc.size > 1 else np.zeros(0)
        worst = float(rises.max()) if rises.size else 0.0
        summary.verdicts["cauchy_increments_monotone"] = _verdict(worst <= floor, worst_rise=worst, floor=floor)
    tr = config.diagnostic("trace")
    if tr["enabled"]:
        compact = family.series("compact_trace")
        glob = family.series("global_trace")
        variation = float((compact.max() - compact.min()) / compact.min())
        limit = float(tr["max_variation"])
        summary.verdicts["compact_trace_variation"] = _verdict(variation <= limit, variation=variation, limit=limit)
        steps = np.diff(glob)
        summary.verdicts["global_trace_increasing"] = _verdict(bool(np.all(steps > 0)),
                                                               smallest_step=float(steps.min()) if steps.size else 0.0)


def _closed_form_c_delta(config: ScenarioConfig, delta: float) -> float:
    """(A^2 + 2 delta A.W + delta^2 W^2) / int f W^2 from class vectors alone."""
    a_cls = config.alpha.class_vector
    w_cls = config.omega.class_vector
    numer = a_cls.square() + 2 * delta * a_cls.pair(w_cls) + delta ** 2 * w_cls.square()
    if config.rhs is None:
        return numer / w_cls.square()
    return numer / integrate(config.rhs * wedge2(config.omega))


def _write_csv(path: Path, trajectory):
    cols, rows = trajectory.csv_rows()
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in rows:
            writer.writerow([repr(float(row[c])) for c in cols])


def run_scenario(config: ScenarioConfig, out_dir=None) -> RunSummary:
    """Run the configured stages in order and write outputs to ``out_dir``.

    ``out_dir`` overrides ``output.directory``; with neither set nothing is
    written.  Stage failures are re-raised as StageError.
    """
    start = time.perf_counter()
    # Re-check every invariant against the data actually about to run.
    config = load_scenario(config.data, config.base_dir, strict=True)
    out = out_dir if out_dir is not None else config.data["output"]["directory"]
    out = None if out is None else Path(out)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    summary = RunSummary(config.scenario_hash, config.name, "NOT_RUN")
    chi, omega = config.chi, config.omega
    solution = family = trajectory = None

    if config.phi0 is not None:
        summary.I0 = functional_I(config.phi0, chi)
        summary.J0 = functional_J(config.phi0, chi, omega)

    if "elliptic" in config.stages:
        try:
            solution, family = _run_elliptic(config, summary)
        except JFlowError as exc:
            raise StageError("elliptic", exc) from exc
        summary.status = "SOLVED"
        if out is not None:
            write_field(out / "psi.jflb", solution.psi)
            if family is not None:
                (out / "family.json").write_text(json.dumps(family.as_json(), indent=2) + "\n")

    h_eps = config.diagnostic("h_epsilon")
    snapshots = config.data["output"]["snapshots"]
    if "flow" in config.stages:
        try:
            flow = JFlow(chi, omega, 1.0)
            eps0 = float(h_eps["epsilons"][0]) if h_eps["enabled"] else None
            keep = h_eps["enabled"] or snapshots == "all"
            trajectory = run_flow(flow, config.phi0, config.flow_config(keep),
                                  reference=None if solution is None else solution.psi, epsilon=eps0)
        except JFlowError as exc:
            raise StageError("flow", exc) from exc
        final = trajectory.final_state
        summary.status = trajectory.status.value
        summary.I_end = functional_I(final.phi, chi)
        summary.J_end = functional_J(final.phi, chi, omega)
        _flow_verdicts(config, trajectory, summary)
        if out is not None:
            _write_csv(out / "trajectory.csv", trajectory)
            write_field(out / "phi0.jflb", config.phi0)
            if snapshots != "none":
                write_field(out / "phi_final.jflb", final.phi)
            if snapshots == "all":
                snap_dir = out / "snapshots"
                snap_dir.mkdir(exist_ok=True)
                for i, (_, phi) in enumerate(trajectory.snapshots):
                    write_field(snap_dir / f"phi_{i:05d}.jflb", phi)

    if "compare" in config.stages:
        try:
            cmp = compare_limits(trajectory.final_state.phi, solution.psi, chi,
                                 float(config.data["compare"]["tolerance"]))
            summary.verdicts["flow_elliptic_limit"] = _verdict(cmp.passed, **{k: v for k, v in cmp.as_dict().items()
                                                                            if k != "passed"})
            if h_eps["enabled"]:
                for eps in h_eps["epsilons"]:
                    rep = comparison_H_epsilon(trajectory, solution.psi, float(eps), float(h_eps["slack"]))
                    d = rep.as_dict()
                    summary.verdicts[f"h_epsilon_{eps:g}"] = _verdict(d.pop("passed"), **d)
        except JFlowError as exc:
            raise StageError("compare", exc) from exc

    gc = config.diagnostic("gradient_check")
    if gc["enabled"]:
        phi = config.phi0 if config.phi0 is not None else config.grid.zeros()
        rng = np.random.default_rng([int(config.data["seed"]), _STREAMS["gradient_check"]])
        dirs = [config.grid.random_potential(rng, band=min(4, config.grid.resolution // 4))
                for _ in range(int(gc["directions"]))]
        err = gradient_check(phi, chi, omega, dirs, float(gc["h"]))
        summary.verdicts["gradient_check"] = _verdict(err <= float(gc["tolerance"]), max_relative_error=err,
                                                      tolerance=float(gc["tolerance"]))

    summary.wall_clock = time.perf_counter() - start
    if out is not None:
        (out / "summary.json").write_text(json.dumps(summary.as_json(), indent=2, sort_keys=True) + "\n")
    log.info("scenario %s finished in %.2fs: %s", config.name, summary.wall_clock, summary.status)
    return summary


def _flow_verdicts(config: ScenarioConfig, trajectory, summary: RunSummary):
    f = config.data["flow"]
    summary.verdicts["flow_converged"] = _verdict(trajectory.status is Status.CONVERGED,
                                                  status=trajectory.status.value, steps=trajectory.steps,
                                                  final_time=trajectory.final_state.time)
    i_series = trajectory.series("I")
    scale = abs(i_series[0]) if i_series[0] != 0 else 1.0
    drift = float(np.max(np.abs(i_series - i_series[0])) / scale)
    tol = float(f["conservation_tol"])
    summary.verdicts["I_conserved"] = _verdict(drift <= tol, relative_drift=drift, tolerance=tol)
    slack = float(f["monotonicity_slack"])
    summary.verdicts["J_nonincreasing"] = _verdict(trajectory.max_J_increase <= slack,
                                                   max_increase=trajectory.max_J_increase, slack=slack)
