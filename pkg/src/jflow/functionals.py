"""The I and J functionals: closed forms, path quadrature and first variation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NormalizationError
from .geometry import (
    HermitianFormField,
    ScalarField,
    ddc,
    integrate,
    topological_constant,
    wedge11,
    wedge2,
)

NORMALIZATION_TOL = 1e-10


@dataclass
class FunctionalReport:
    I_value: float
    J_value: float
    path_J_value: float | None = None
    path_tolerance: float | None = None
    gradient_check_error: float | None = None

    def as_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


def check_normalized(chi: HermitianFormField, omega: HermitianFormField, tol: float = NORMALIZATION_TOL) -> float:
    c = topological_constant(chi, omega)
    if abs(c - 1.0) > tol:
        raise NormalizationError(f"topological constant is {c:.12g}; rescale chi by c so that c = 1")
    return c


def functional_I(phi: ScalarField, chi: HermitianFormField) -> float:
    """I(phi) = 1/3 int phi (chi_phi^2 + chi_phi ^ chi + chi^2)."""
    chi_phi = chi + ddc(phi)
    density = wedge2(chi_phi).values + wedge11(chi_phi, chi).values + wedge2(chi).values
    return float(np.mean(phi.values * density)) / 3.0


def functional_J(phi: ScalarField, chi: HermitianFormField, omega: HermitianFormField,
                 require_normalized: bool = True) -> float:
    """J(phi) = int phi (chi_phi ^ omega + chi ^ omega) - I(phi).

    The closed form is the c = 1 functional; pass ``require_normalized=False``
    to evaluate it on backgrounds with another topological constant.
    """
    if require_normalized:
        check_normalized(chi, omega)
    chi_phi = chi + ddc(phi)
    linear = wedge11(chi_phi, omega).values + wedge11(chi, omega).values
    cubic = wedge2(chi_phi).values + wedge11(chi_phi, chi).values + wedge2(chi).values
    return float(np.mean(phi.values * (linear - cubic / 3.0)))


def variational_derivative_J(phi: ScalarField, chi: HermitianFormField, omega: HermitianFormField) -> ScalarField:
    """Density 2 chi_phi ^ omega - chi_phi^2 of the first variation of J."""
    chi_phi = chi + ddc(phi)
    return 2.0 * wedge11(chi_phi, omega) - wedge2(chi_phi)


# Reparametrizations s(t) of the segment from 0 to phi, with derivative s'(t).
PATHS = {
    "linear": (lambda t: t, lambda t: 1.0),
    "sine": (lambda t: np.sin(0.5 * np.pi * t), lambda t: 0.5 * np.pi * np.cos(0.5 * np.pi * t)),
}


def _simpson(values, steps):
    h = 1.0 / steps
    w = np.ones(steps + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return h / 3.0 * float(np.dot(w, values))


def _path_integral(phi, chi, density, steps, path):
    if steps < 2 or steps % 2:
        raise ValueError(f"Simpson quadrature needs an even number of steps >= 2, got {steps}")
    s, ds = PATHS[path]
    dd_phi = ddc(phi)
    values = []
    for t in np.linspace(0.0, 1.0, steps + 1):
        chi_t = chi + s(t) * dd_phi
        values.append(ds(t) * integrate(phi * density(chi_t)))
    return _simpson(values, steps)


def functional_J_path(phi: ScalarField, chi: HermitianFormField, omega: HermitianFormField,
                      steps: int = 64, path: str = "linear") -> float:
    """Simpson quadrature of int_0^1 int dphi_t/dt (2 chi_t ^ omega - chi_t^2) dt along phi_t = s(t) phi.

    Along the linear path the integrand is quadratic in t and Simpson is exact;
    ``path="sine"`` uses a non-polynomial reparametrization of the same
    segment, for which the error decays like ``steps**-4``.
    """
    return _path_integral(phi, chi, lambda chi_t: 2.0 * wedge11(chi_t, omega) - wedge2(chi_t), steps, path)


def functional_I_path(phi: ScalarField, chi: HermitianFormField, steps: int = 64, path: str = "linear") -> float:
    return _path_integral(phi, chi, wedge2, steps, path)


def gradient_check(phi: ScalarField, chi: HermitianFormField, omega: HermitianFormField,
                   directions: list[ScalarField], h: float = 1e-5) -> float:
    """Worst relative error between central differences of J and the variational derivative."""
    density = variational_derivative_J(phi, chi, omega)
    worst = 0.0
    for eta in directions:
        fd = (functional_J(phi + h * eta, chi, omega, False) - functional_J(phi - h * eta, chi, omega, False)) / (2 * h)
        exact = integrate(eta * density)
        worst = max(worst, abs(fd - exact) / max(abs(exact), 1e-300))
    return worst


def report(phi: ScalarField, chi: HermitianFormField, omega: HermitianFormField,
           path_steps: int | None = None, directions=None, h: float = 1e-5) -> FunctionalReport:
    rep = FunctionalReport(functional_I(phi, chi), functional_J(phi, chi, omega))
    if path_steps:
        rep.path_J_value = functional_J_path(phi, chi, omega, path_steps)
        rep.path_tolerance = 1e-8 * (1.0 + abs(rep.J_value))
    if directions:
        rep.gradient_check_error = gradient_check(phi, chi, omega, directions, h)
    return rep
