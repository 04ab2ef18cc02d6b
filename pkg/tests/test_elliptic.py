import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import const_form, cos_x1, identity
from jflow.elliptic import (
    DEFAULT_SCHEDULE,
    DegeneracySurrogate,
    EllipticProblem,
    EllipticSolution,
    TraceLaplacian,
    comparison_H_epsilon,
    normalization_constant,
    residual_ma,
    solve_degenerate_family,
    solve_ma_newton,
    trace_diagnostic,
)
from jflow.errors import (
    ContinuationNeededError,
    FamilyError,
    InvalidFieldError,
    NoConvergenceError,
    PreconditionError,
)
from jflow.flow import Trajectory
from jflow.geometry import (
    Grid,
    Mode,
    ScalarField,
    ddc,
    derivative_norms,
    integrate,
    min_eigenvalue_field,
    wedge11,
    wedge2,
)

seeds = st.integers(0, 2**32 - 1)


def degenerate_alpha(grid):
    """id + dd^c(u) with alpha_11 = 1 - cos(2 pi x1), singular on x1 = 0."""
    return identity(grid) + ddc(cos_x1(grid, 4.0 / (4 * np.pi ** 2)))


# normalization constant

@pytest.mark.parametrize("alpha,delta,expected", [
    (np.eye(2), 0.0, 1.0),
    (np.eye(2), 0.5, 2.25),
    (np.diag([2.0, 0.5]), 0.0, 1.0),
    (np.diag([2.0, 0.5]), 0.25, 1 + 2 * 0.25 * 2.5 / 2 + 0.25 ** 2),
])
def test_normalization_constant_examples(grid16, alpha, delta, expected):
    c = normalization_constant(const_form(grid16, alpha), identity(grid16), delta)
    assert c == pytest.approx(expected, abs=1e-14)


@pytest.mark.parametrize("delta", DEFAULT_SCHEDULE)
def test_normalization_constant_closed_form_on_degenerate_alpha(grid16, delta):
    # [alpha] = [omega] = id, so c_delta = (1 + delta)^2
    c = normalization_constant(degenerate_alpha(grid16), identity(grid16), delta)
    assert abs(c - (1 + delta) ** 2) <= 1e-12


def test_normalization_constant_zero_denominator(grid16):
    with pytest.raises(ZeroDivisionError):
        normalization_constant(identity(grid16), identity(grid16), 0.0, rhs_density=grid16.zeros())


def test_problem_validation(grid16, grid32):
    with pytest.raises(PreconditionError):
        EllipticProblem(identity(grid16), identity(grid32))
    with pytest.raises(PreconditionError):
        EllipticProblem(identity(grid16), identity(grid16), delta=-0.1)
    with pytest.raises(PreconditionError):
        EllipticProblem(const_form(grid16, np.diag([1.0, -0.5])), identity(grid16))
    with pytest.raises(PreconditionError):
        EllipticProblem(identity(grid16), identity(grid16), rhs_density=cos_x1(grid16) + 1.0)
    bad = grid16.constant(1.0)
    bad.values[0, 0] = np.inf
    with pytest.raises(InvalidFieldError):
        EllipticProblem(identity(grid16), identity(grid16), rhs_density=bad)


def test_problem_mass_identity(grid16, rng):
    alpha = identity(grid16) + ddc(grid16.random_potential(rng, band=3, amplitude=0.01))
    f = 1.0 + 0.5 * cos_x1(grid16)
    p = EllipticProblem(alpha, identity(grid16), 0.1, f)
    assert integrate(p.target()) == pytest.approx(integrate(wedge2(p.alpha_delta)), rel=1e-12)


# trace Laplacian

def test_trace_laplacian_is_symmetric_positive(grid16, rng):
    a = identity(grid16, 1.5) + ddc(grid16.random_potential(rng, band=3, amplitude=0.02))
    op = TraceLaplacian(a)
    u = op.project(grid16.random_potential(rng).values)
    v = op.project(grid16.random_potential(rng).values)
    assert np.sum(u * op.apply(v)) == pytest.approx(np.sum(v * op.apply(u)), rel=1e-12)
    assert np.sum(u * op.apply(u)) > 0


def test_trace_laplacian_matches_trace_form(grid16, rng):
    a = identity(grid16, 1.5) + ddc(grid16.random_potential(rng, band=2, amplitude=0.02))
    op = TraceLaplacian(a)
    u = grid16.random_potential(rng, band=3)
    trace_form = -wedge11(a, ddc(u)).values
    assert np.max(np.abs(op.apply(u.values) - trace_form)) < 1e-10


def test_trace_laplacian_solve(grid16, rng):
    a = identity(grid16) + ddc(grid16.random_potential(rng, band=3, amplitude=0.02))
    op = TraceLaplacian(a)
    eta_true = op.project(grid16.random_potential(rng, band=4).values)
    eta = op.solve(op.apply(eta_true))
    assert np.max(np.abs(eta - eta_true)) < 1e-10


# Newton

def test_newton_trivial_zero_iterations(grid16):
    sol = solve_ma_newton(EllipticProblem(identity(grid16), identity(grid16)))
    assert sol.newton_iterations == 0
    assert sol.psi.sup_norm() == 0.0
    assert isinstance(sol, EllipticSolution)


def test_newton_constant_determinant_match(grid16):
    sol = solve_ma_newton(EllipticProblem(const_form(grid16, np.diag([2.0, 0.5])), identity(grid16)))
    assert sol.psi.sup_norm() <= 1e-14


def test_newton_cosine_rhs_closed_form():
    g = Grid(Mode.REDUCED, 64)
    f = 1.0 + cos_x1(g, 0.1)
    sol = solve_ma_newton(EllipticProblem(identity(g), identity(g), 0.0, f))
    exact = cos_x1(g, -0.1 / np.pi ** 2)
    assert (sol.psi - exact).sup_norm() <= 1e-8
    assert abs(sol.psi.mean()) < 1e-15
    assert residual_ma(sol.psi, identity(g), identity(g), sol.c_delta, f) <= 1e-8


def test_newton_full_mode():
    # modes mixing x and y directions exercise the imaginary part of the off-diagonal entry
    g = Grid(Mode.FULL, 16)
    f = 1.0 + g.fourier([{"k": [1, 0, 0, 1], "cos": 0.05}, {"k": [0, 1, 1, 0], "sin": 0.03}])
    sol = solve_ma_newton(EllipticProblem(identity(g), identity(g), 0.0, f))
    assert sol.residual_sup <= 1e-11
    assert residual_ma(sol.psi, identity(g), identity(g), sol.c_delta, f) <= 1e-10


def test_newton_reports_nyquist_floor(grid16):
    # at 16 nodes the log residual keeps ~1e-8 in Nyquist modes, out of reach of dd^c
    rng = np.random.default_rng(0)
    alpha = identity(grid16) + ddc(grid16.random_potential(rng, band=3, amplitude=0.01))
    f = 1.0 + 0.3 * grid16.random_potential(rng, band=3)
    with pytest.raises(NoConvergenceError, match="Nyquist"):
        solve_ma_newton(EllipticProblem(alpha, identity(grid16), 0.0, f))


def test_newton_with_nonconstant_omega_converges_quadratically(grid32, rng):
    omega = identity(grid32) + ddc(grid32.random_potential(rng, band=3, amplitude=0.02))
    alpha = const_form(grid32, np.array([[1.0, 0.2j], [-0.2j, 1.0]]))
    sol = solve_ma_newton(EllipticProblem(alpha, omega))
    hist = np.array(sol.residual_history)
    assert sol.residual_sup <= 1e-11
    assert sol.mass_error <= 1e-10
    after = np.argmax(hist < 1e-3)
    assert hist[after] < 1e-3
    assert len(hist) - 1 - after <= 6


def test_newton_large_gradient_rhs(grid32):
    # sharpened cosine power: bounded continuous f with steep gradients
    x1 = grid32.coordinate("x1")
    f = ScalarField(grid32, 0.2 + np.cos(np.pi * x1) ** 16)
    sol = solve_ma_newton(EllipticProblem(identity(grid32), identity(grid32), 0.0, f))
    assert sol.residual_sup <= 1e-11
    assert sol.mass_error <= 1e-10


def test_newton_uniqueness_from_independent_guesses(grid32, rng):
    omega = identity(grid32) + ddc(grid32.random_potential(rng, band=3, amplitude=0.01))
    p = EllipticProblem(identity(grid32, 1.0), omega)
    a = solve_ma_newton(p)
    b = solve_ma_newton(p, initial_guess=grid32.random_potential(rng, band=3, amplitude=0.02))
    assert (a.psi.centered() - b.psi.centered()).sup_norm() <= 1e-9


def test_newton_rejects_inadmissible_guess(grid16):
    with pytest.raises(ContinuationNeededError):
        solve_ma_newton(EllipticProblem(identity(grid16), identity(grid16)), cos_x1(grid16, 1.0))


def test_newton_iteration_cap(grid32):
    f = 1.0 + cos_x1(grid32, 0.5)
    with pytest.raises(NoConvergenceError):
        solve_ma_newton(EllipticProblem(identity(grid32), identity(grid32), 0.0, f), max_iter=1)


@pytest.mark.parametrize("alpha,expected", [(np.eye(2), 0.0), (2 * np.eye(2), 6.0)])
def test_residual_ma_examples(grid16, alpha, expected):
    assert residual_ma(grid16.zeros(), const_form(grid16, alpha), identity(grid16), 1.0) == pytest.approx(expected)


# degenerate family

def test_family_positive_alpha_is_trivial(grid16):
    sol, diags = solve_degenerate_family(identity(grid16, 1.3), identity(grid16), (0.5, 0.25, 0.125))
    assert sol.psi.sup_norm() < 1e-14
    assert np.all(diags.series("sup_psi") < 1e-14)
    assert np.all(diags.series("cauchy_increment")[1:] == 0)
    assert np.isnan(diags.series("cauchy_increment")[0])


@pytest.fixture(scope="module")
def degenerate_family():
    g = Grid(Mode.REDUCED, 32)
    alpha = degenerate_alpha(g)
    weight = ScalarField(g, 0.5 - 0.5 * np.cos(2 * np.pi * g.coordinate("x1")))
    surrogate = DegeneracySurrogate(weight, 0.1)
    sol, diags = solve_degenerate_family(alpha, identity(g), DEFAULT_SCHEDULE, surrogate=surrogate)
    return g, alpha, surrogate, sol, diags


def test_degenerate_alpha_touches_zero(degenerate_family):
    g, alpha, *_ = degenerate_family
    lam = min_eigenvalue_field(alpha)
    assert abs(lam.min()) < 1e-12
    assert np.all(lam.values[0] < 1e-12)


def test_family_c_delta_closed_form(degenerate_family):
    *_, diags = degenerate_family
    deltas = diags.series("delta")
    assert np.max(np.abs(diags.series("c_delta") - (1 + deltas) ** 2)) <= 1e-12


def test_family_sup_norm_stays_in_band(degenerate_family):
    *_, sol, diags = degenerate_family
    sups = diags.series("sup_psi")
    assert np.ptp(sups) <= 0.1 * sups.max() + 1e-12
    assert np.all(diags.series("residual") <= 1e-11)


def test_family_cauchy_increments_non_increasing(degenerate_family):
    *_, diags = degenerate_family
    inc = diags.series("cauchy_increment")[1:]
    assert np.all(np.diff(inc) <= 1e-10)


def test_family_json_records(degenerate_family):
    *_, diags = degenerate_family
    rec = diags.as_json()
    assert len(rec) == len(DEFAULT_SCHEDULE)
    assert {"delta", "c_delta", "sup_psi", "cauchy_increment", "newton_iters", "compact_trace",
            "global_trace"} <= set(rec[0])


def test_family_interior_derivatives_bounded(degenerate_family):
    g, alpha, surrogate, sol, diags = degenerate_family
    mask = surrogate.compact_mask()
    norms = derivative_norms(sol.psi, mask, max_order=3)
    assert all(np.isfinite(norms))


def test_family_schedule_validation(grid16):
    with pytest.raises(PreconditionError):
        solve_degenerate_family(identity(grid16), identity(grid16), (0.25, 0.5))
    with pytest.raises(PreconditionError):
        solve_degenerate_family(const_form(grid16, np.diag([1.0, -1.0])), identity(grid16))
    with pytest.raises(PreconditionError):
        solve_degenerate_family(const_form(grid16, np.diag([1.0, 0.0])), identity(grid16))


def test_family_error_reports_delta(grid16):
    f = 1.0 + cos_x1(grid16, 0.5)
    with pytest.raises(FamilyError) as info:
        solve_degenerate_family(identity(grid16), identity(grid16), (0.5, 0.25), rhs_density=f, max_iter=1)
    assert info.value.delta == 0.5


# trace diagnostic

def test_trace_diagnostic_positive_alpha(grid16):
    for delta in (0.5, 0.1):
        sol = solve_ma_newton(EllipticProblem(identity(grid16), identity(grid16), delta))
        weight = 0.5 - 0.5 * cos_x1(grid16)
        rep = trace_diagnostic(sol, identity(grid16), identity(grid16), DegeneracySurrogate(weight, 0.1))
        assert rep.compact_trace == pytest.approx(rep.global_trace)
        assert rep.compact_trace == pytest.approx(2 * (1 + delta))


def test_trace_diagnostic_zero_threshold_is_global(degenerate_family):
    g, alpha, surrogate, sol, diags = degenerate_family
    rep = trace_diagnostic(sol, alpha, identity(g), DegeneracySurrogate(surrogate.weight, 0.0))
    assert rep.compact_trace == rep.global_trace


def test_surrogate_validation(grid16):
    with pytest.raises(PreconditionError):
        DegeneracySurrogate(cos_x1(grid16), 0.1)
    with pytest.raises(PreconditionError):
        DegeneracySurrogate(grid16.constant(1.0), -0.1)


def test_trace_diagnostic_empty_compact_set(grid16):
    sol = solve_ma_newton(EllipticProblem(identity(grid16), identity(grid16), 0.5))
    with pytest.raises(PreconditionError):
        trace_diagnostic(sol, identity(grid16), identity(grid16), DegeneracySurrogate(grid16.constant(0.5), 0.9))


# H_epsilon

def _trajectory(snaps):
    traj = Trajectory()
    traj.snapshots = snaps
    traj.times = [t for t, _ in snaps]
    return traj


@pytest.mark.parametrize("eps", [1e-2, 1e-3, 0.5])
def test_h_epsilon_stationary_trajectory(grid16, rng, eps):
    psi = grid16.random_potential(rng)
    snaps = [(t, psi + 0.3) for t in np.linspace(0, 2, 9)]
    rep = comparison_H_epsilon(_trajectory(snaps), psi, eps)
    assert rep.passed
    assert rep.argmax_time == 0.0
    assert np.allclose(rep.upper, rep.upper[0] - eps * rep.times, atol=1e-15)
    assert rep.max_excess == 0.0


def test_h_epsilon_detects_growth(grid16, rng):
    psi = grid16.random_potential(rng)
    snaps = [(t, psi + 0.1 * t) for t in np.linspace(0, 1, 5)]
    rep = comparison_H_epsilon(_trajectory(snaps), psi, 0.01)
    assert not rep.passed_upper
    assert rep.max_excess == pytest.approx(0.09)


@pytest.mark.parametrize("eps", [0.0, -1e-3])
def test_h_epsilon_rejects_non_positive_epsilon(grid16, eps):
    snaps = [(0.0, grid16.zeros())]
    with pytest.raises(PreconditionError):
        comparison_H_epsilon(_trajectory(snaps), grid16.zeros(), eps)


def test_h_epsilon_grid_mismatch(grid16, grid32):
    with pytest.raises(PreconditionError):
        comparison_H_epsilon(_trajectory([(0.0, grid16.zeros())]), grid32.zeros(), 0.01)


@settings(max_examples=10, deadline=None)
@given(seeds)
def test_newton_solution_residual_property(seed):
    rng = np.random.default_rng(seed)
    g = Grid(Mode.REDUCED, 32)
    alpha = identity(g) + ddc(g.random_potential(rng, band=3, amplitude=0.01))
    f = 1.0 + 0.3 * g.random_potential(rng, band=3)
    sol = solve_ma_newton(EllipticProblem(alpha, identity(g), 0.0, f))
    assert sol.residual_sup <= 1e-11
    assert abs(sol.psi.mean()) <= 1e-14
    assert sol.mass_error <= 1e-10
