"""Regularized complex Monge-Ampere solver and the comparison/trace diagnostics.

Solves ``(alpha + delta omega + dd^c psi)^2 = c_delta f omega^2`` for a
mean-zero ``psi`` by damped Newton on the log of the determinant ratio, and
passes ``delta -> 0`` by continuation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from .errors import (
    ContinuationNeededError,
    FamilyError,
    InvalidFieldError,
    JFlowError,
    NoConvergenceError,
    PreconditionError,
)
from .geometry import (
    Grid,
    HermitianFormField,
    Mode,
    ScalarField,
    ddc,
    integrate,
    min_eigenvalue_field,
    trace_with,
    wedge11,
    wedge2,
)

log = logging.getLogger(__name__)

DEFAULT_SCHEDULE = tuple(2.0 ** -k for k in range(1, 13))


def normalization_constant(alpha: HermitianFormField, omega: HermitianFormField, delta: float,
                           rhs_density: ScalarField | None = None) -> float:
    """c_delta making both sides of the regularized equation have equal integrals."""
    w2_omega = wedge2(omega)
    denom = integrate(w2_omega if rhs_density is None else rhs_density * w2_omega)
    if denom == 0:
        raise ZeroDivisionError("int f omega^2 vanishes")
    return integrate(wedge2(alpha + delta * omega)) / denom


@dataclass
class EllipticProblem:
    alpha: HermitianFormField
    omega: HermitianFormField
    delta: float = 0.0
    rhs_density: ScalarField | None = None
    c_delta: float = field(init=False)

    def __post_init__(self):
        if self.alpha.grid != self.omega.grid:
            raise PreconditionError("alpha and omega live on different grids")
        if self.delta < 0:
            raise PreconditionError(f"delta must be >= 0, got {self.delta}")
        if integrate(wedge2(self.omega)) <= 0:
            raise PreconditionError("omega^2 must have positive integral")
        f = self.rhs_density
        if f is not None:
            if not np.all(np.isfinite(f.values)):
                raise InvalidFieldError("rhs density must be finite")
            if f.min() <= 0:
                raise PreconditionError("rhs density must be strictly positive for the Newton solver")
        lam = min_eigenvalue_field(self.alpha_delta).min()
        if self.delta == 0 and lam < -1e-10:
            raise PreconditionError(f"alpha is not semipositive (min eig {lam:.3e})")
        if self.delta > 0 and lam <= 0:
            raise PreconditionError(f"alpha + delta omega is not positive (min eig {lam:.3e})")
        self.c_delta = normalization_constant(self.alpha, self.omega, self.delta, f)

    @property
    def grid(self) -> Grid:
        return self.alpha.grid

    @property
    def alpha_delta(self) -> HermitianFormField:
        return self.alpha + self.delta * self.omega if self.delta else self.alpha

    def target(self) -> ScalarField:
        """Right-hand side density c_delta f omega^2."""
        t = self.c_delta * wedge2(self.omega)
        return t if self.rhs_density is None else t * self.rhs_density


@dataclass
class EllipticSolution:
    psi: ScalarField
    residual_sup: float
    newton_iterations: int
    delta: float
    c_delta: float
    min_eig_series: list = field(default_factory=list)
    residual_history: list = field(default_factory=list)
    mass_error: float = 0.0


def _flux_coefficients(a: HermitianFormField) -> dict:
    """Real symmetric coefficients B_pq with wedge11(A, dd^c eta) = 1/4 sum B_pq d_p d_q eta."""
    if a.grid.mode is Mode.REDUCED:
        r = np.real(a.a12)
        return {(0, 0): a.a22, (1, 1): a.a11, (0, 1): -r}
    r, s = np.real(a.a12), np.imag(a.a12)
    # axes: x1, y1, x2, y2
    return {(0, 0): a.a22, (1, 1): a.a22, (2, 2): a.a11, (3, 3): a.a11,
            (0, 2): -r, (1, 3): -r, (1, 2): -s, (0, 3): s}


class TraceLaplacian:
    """eta -> -wedge11(A, dd^c eta) in divergence form, SPD on mean-zero fields.

    For closed A the cofactor coefficients are divergence free, so the
    divergence form agrees with the trace form and is exactly symmetric on
    the grid.
    """

    def __init__(self, a: HermitianFormField):
        grid = a.grid
        self.grid = grid
        coeffs = _flux_coefficients(a)
        d = grid.ndim
        self.B = [[None] * d for _ in range(d)]
        for (p, q), v in coeffs.items():
            self.B[p][q] = self.B[q][p] = np.asarray(v, dtype=float)
        k = grid.wavenumbers
        symbol = 0.0
        for (p, q), v in coeffs.items():
            weight = 1.0 if p == q else 2.0
            symbol = symbol + weight * float(np.mean(v)) * k[p] * k[q]
        symbol = 0.25 * np.broadcast_to(symbol, grid.nyquist_mask.shape)
        self.null = symbol <= 1e-14 * float(np.max(symbol))
        self.inv_symbol = np.where(self.null, 0.0, 1.0 / np.where(self.null, 1.0, symbol))

    def apply(self, values: np.ndarray) -> np.ndarray:
        grid = self.grid
        k = grid.wavenumbers
        coeffs = grid.fft(values)
        grads = [grid.ifft(1j * kq * coeffs) for kq in k]
        out = 0.0
        for p in range(grid.ndim):
            flux = sum(self.B[p][q] * grads[q] for q in range(grid.ndim) if self.B[p][q] is not None)
            out = out + 1j * k[p] * grid.fft(flux)
        return -0.25 * grid.ifft(out)

    def project(self, values: np.ndarray) -> np.ndarray:
        """Remove the components in the operator's null space (mean and pure Nyquist modes)."""
        coeffs = self.grid.fft(values)
        coeffs[self.null] = 0.0
        return self.grid.ifft(coeffs)

    def precondition(self, values: np.ndarray) -> np.ndarray:
        return self.grid.ifft(self.grid.fft(values) * self.inv_symbol)

    def solve(self, rhs: np.ndarray, rtol: float = 1e-13, maxiter: int = 1000,
              exact=None, refinements: int = 3) -> np.ndarray:
        """CG solve of ``K eta = rhs`` on the complement of the null space.

        ``exact`` (a callable) is the pointwise trace-form operator; when
        given, defect-correction sweeps remove the divergence/trace mismatch.
        """
        eta = self._cg(rhs, rtol, maxiter)
        if exact is None:
            return eta
        b = self.project(rhs)
        bnorm = np.linalg.norm(b)
        for _ in range(refinements):
            defect = self.project(b - exact(eta))
            if np.linalg.norm(defect) <= rtol * bnorm:
                break
            eta = eta + self._cg(defect, rtol, maxiter)
        return eta

    def _cg(self, rhs: np.ndarray, rtol: float, maxiter: int) -> np.ndarray:
        shape = self.grid.shape
        size = int(np.prod(shape))
        op = LinearOperator((size, size), matvec=lambda v: self.apply(v.reshape(shape)).ravel(), dtype=float)
        pre = LinearOperator((size, size), matvec=lambda v: self.precondition(v.reshape(shape)).ravel(),
                             dtype=float)
        b = self.project(rhs).ravel()
        x, info = cg(op, b, M=pre, rtol=rtol, atol=0.0, maxiter=maxiter)
        if info > 0:
            log.debug("CG stopped at maxiter=%d before rtol=%g", maxiter, rtol)
        return self.project(x.reshape(shape))


def _unresolved_part(grid: Grid, res: np.ndarray) -> float:
    """Sup norm of the residual component carried by Nyquist modes."""
    coeffs = grid.fft(res)
    return float(np.max(np.abs(grid.ifft(np.where(grid.nyquist_mask, coeffs, 0.0)))))


def _log_residual(problem: EllipticProblem, a: HermitianFormField, log_target: np.ndarray) -> np.ndarray:
    return np.log(wedge2(a).values) - log_target


def solve_ma_newton(problem: EllipticProblem, initial_guess: ScalarField | None = None,
                    tol: float = 1e-11, max_iter: int = 100, eig_floor: float = 1e-12,
                    max_backtracks: int = 40, cg_rtol: float = 1e-13) -> EllipticSolution:
    """Damped Newton for ``log wedge2(alpha_delta + dd^c psi) = log(c_delta f wedge2(omega))``.

    Each step solves ``tr_A dd^c eta = -F + lambda`` with the constant
    ``lambda`` making the linear problem solvable, then backtracks until
    ``A`` stays above ``eig_floor`` and the L2 residual decreases.
    """
    grid = problem.grid
    base = problem.alpha_delta
    target = problem.target()
    log_target = np.log(target.values)
    psi = grid.zeros() if initial_guess is None else initial_guess.centered()

    a = base + ddc(psi)
    lam = min_eigenvalue_field(a).min()
    if lam <= eig_floor:
        raise ContinuationNeededError(f"initial guess is not admissible (min eig {lam:.3e})")
    res = _log_residual(problem, a, log_target)
    sup = float(np.max(np.abs(res)))
    history, eigs = [sup], [lam]
    it = 0
    while sup > tol:
        if it >= max_iter:
            raise NoConvergenceError(f"Newton did not converge in {max_iter} iterations (residual {sup:.3e})")
        det = 0.5 * wedge2(a).values
        shift = float(np.sum(res * det) / np.sum(det))
        eta = TraceLaplacian(a).solve((res - shift) * det, rtol=cg_rtol,
                                      exact=lambda v: -wedge11(a, ddc(ScalarField(grid, v, check=False))).values)
        merit = float(np.sqrt(np.mean(res ** 2)))
        step, accepted, admissible = 1.0, False, False
        for _ in range(max_backtracks):
            trial_psi = ScalarField(grid, psi.values + step * eta, check=False)
            trial = base + ddc(trial_psi)
            trial_lam = min_eigenvalue_field(trial).min()
            if trial_lam > eig_floor:
                admissible = True
                trial_res = _log_residual(problem, trial, log_target)
                if float(np.sqrt(np.mean(trial_res ** 2))) <= (1.0 - 1e-4 * step) * merit:
                    accepted = True
                    break
            step *= 0.5
        if not admissible:
            raise ContinuationNeededError(f"line search could not keep alpha_delta positive at iteration {it}")
        if not accepted:
            floor = _unresolved_part(grid, res)
            raise NoConvergenceError(f"line search stalled at iteration {it} (residual {sup:.3e}; "
                                     f"{floor:.3e} of it sits in Nyquist modes dd^c cannot reach, "
                                     f"refine the grid if that dominates)")
        psi, a, res, lam = trial_psi.centered(), trial, trial_res, trial_lam
        sup = float(np.max(np.abs(res)))
        history.append(sup)
        eigs.append(lam)
        it += 1
        log.debug("newton it=%d step=%.3g residual=%.3e min_eig=%.3e", it, step, sup, lam)

    mass = integrate(wedge2(a))
    mass_target = integrate(target)
    return EllipticSolution(psi=psi, residual_sup=sup, newton_iterations=it, delta=problem.delta,
                            c_delta=problem.c_delta, min_eig_series=eigs, residual_history=history,
                            mass_error=abs(mass - mass_target) / abs(mass_target))


def residual_ma(psi: ScalarField, alpha: HermitianFormField, omega: HermitianFormField,
                c_target: float, f: ScalarField | None = None) -> float:
    """sup |wedge2(alpha + dd^c psi) - c_target f wedge2(omega)|."""
    rhs = c_target * wedge2(omega)
    if f is not None:
        rhs = rhs * f
    return (wedge2(alpha + ddc(psi)) - rhs).sup_norm()


@dataclass
class DegeneracySurrogate:
    """Smooth weight vanishing on the degeneracy locus of alpha, plus a compact-subset threshold."""

    weight: ScalarField
    threshold: float = 0.1

    def __post_init__(self):
        if self.weight.min() < -1e-12:
            raise PreconditionError("surrogate weight must be nonnegative")
        if self.threshold < 0:
            raise PreconditionError("threshold must be nonnegative")

    def compact_mask(self) -> np.ndarray:
        return self.weight.values >= self.threshold


@dataclass
class TraceReport:
    compact_trace: float
    global_trace: float
    Q_max: float


def trace_diagnostic(solution: EllipticSolution, alpha: HermitianFormField, omega: HermitianFormField,
                     surrogate: DegeneracySurrogate | None = None, A: float = 1.0, a: float = 1.0) -> TraceReport:
    """Traces of alpha_delta = alpha + delta omega + dd^c psi against omega.

    ``Q = log tr_omega alpha_delta - A (psi - a log weight)`` is evaluated where
    the surrogate weight is positive.
    """
    alpha_delta = alpha + solution.delta * omega + ddc(solution.psi)
    tr = trace_with(omega, alpha_delta).values
    if surrogate is None:
        return TraceReport(float(tr.max()), float(tr.max()), float(np.max(np.log(tr) - A * solution.psi.values)))
    mask = surrogate.compact_mask()
    if not mask.any():
        raise PreconditionError("surrogate threshold leaves no nodes")
    w = surrogate.weight.values
    pos = w > 0
    q = np.log(tr[pos]) - A * (solution.psi.values[pos] - a * np.log(w[pos]))
    return TraceReport(float(tr[mask].max()), float(tr.max()), float(q.max()))


@dataclass
class DeltaRecord:
    delta: float
    c_delta: float
    sup_psi: float
    cauchy_increment: float | None
    newton_iters: int
    compact_trace: float
    global_trace: float
    Q_max: float
    residual: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class FamilyDiagnostics:
    records: list = field(default_factory=list)

    def series(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def as_json(self) -> list:
        return [r.as_dict() for r in self.records]


def solve_degenerate_family(alpha: HermitianFormField, omega: HermitianFormField,
                            delta_schedule=DEFAULT_SCHEDULE, rhs_density: ScalarField | None = None,
                            surrogate: DegeneracySurrogate | None = None, A: float = 1.0, a: float = 1.0,
                            initial_guess: ScalarField | None = None, tol: float = 1e-11,
                            max_iter: int = 100):
    """Solve the regularized problems along a decreasing ``delta`` schedule with warm starts."""
    lam = min_eigenvalue_field(alpha).min()
    if lam < -1e-10:
        raise PreconditionError(f"alpha is not semipositive (min eig {lam:.3e})")
    if integrate(wedge2(alpha)) <= 0:
        raise PreconditionError("[alpha]^2 must be positive")
    schedule = [float(d) for d in delta_schedule]
    if any(b >= a_ for a_, b in zip(schedule, schedule[1:])):
        raise PreconditionError("delta schedule must be strictly decreasing")
    diags = FamilyDiagnostics()
    guess, previous, solution = initial_guess, None, None
    for delta in schedule:
        try:
            problem = EllipticProblem(alpha, omega, delta, rhs_density)
            solution = solve_ma_newton(problem, guess, tol=tol, max_iter=max_iter)
        except JFlowError as exc:
            raise FamilyError(f"solve failed at delta={delta:g}: {exc}", delta) from exc
        trace = trace_diagnostic(solution, alpha, omega, surrogate, A, a)
        inc = None if previous is None else (solution.psi - previous).sup_norm()
        diags.records.append(DeltaRecord(delta, solution.c_delta, solution.psi.sup_norm(), inc,
                                         solution.newton_iterations, trace.compact_trace,
                                         trace.global_trace, trace.Q_max, solution.residual_sup))
        log.info("delta=%g iters=%d sup|psi|=%.4g", delta, solution.newton_iterations, solution.psi.sup_norm())
        guess = previous = solution.psi
    return solution, diags


@dataclass
class HEpsReport:
    epsilon: float
    times: np.ndarray
    upper: np.ndarray
    lower: np.ndarray
    slack: float
    max_excess: float
    max_deficit: float
    argmax_time: float

    @property
    def passed_upper(self) -> bool:
        return self.max_excess <= self.slack

    @property
    def passed_lower(self) -> bool:
        return self.max_deficit <= self.slack

    @property
    def passed(self) -> bool:
        return self.passed_upper and self.passed_lower

    def as_dict(self) -> dict:
        return {"epsilon": self.epsilon, "max_excess": self.max_excess, "max_deficit": self.max_deficit,
                "argmax_time": self.argmax_time, "slack": self.slack, "passed": self.passed}


def comparison_H_epsilon(trajectory, psi: ScalarField, epsilon: float, slack: float = 1e-7) -> HEpsReport:
    """Check that sup(phi(t) - psi) - eps t peaks at t = 0, and its mirrored lower bound.

    ``max_excess`` is max_t M(t) - M(0) for M(t) = sup(phi - psi) - eps t;
    ``max_deficit`` is m(0) - min_t m(t) for m(t) = inf(phi - psi) + eps t.
    """
    if not epsilon > 0:
        raise PreconditionError(f"epsilon must be positive, got {epsilon}")
    if not trajectory.snapshots:
        raise PreconditionError("trajectory carries no field snapshots")
    times = np.array([t for t, _ in trajectory.snapshots])
    for _, phi in trajectory.snapshots[:1]:
        if phi.grid != psi.grid:
            raise PreconditionError("trajectory and psi live on different grids")
    diffs = [phi.values - psi.values for _, phi in trajectory.snapshots]
    upper = np.array([d.max() for d in diffs]) - epsilon * times
    lower = np.array([d.min() for d in diffs]) + epsilon * times
    return HEpsReport(epsilon, times, upper, lower, slack, float(upper.max() - upper[0]),
                      float(lower[0] - lower.min()), float(times[int(np.argmax(upper))]))
