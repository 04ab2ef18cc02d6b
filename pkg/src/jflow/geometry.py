"""Periodic grids, spectral dd^c and pointwise (1,1)-form algebra on the flat complex 2-torus.

Coordinates are z_j = x_j + i y_j, j = 1, 2, each real coordinate with unit
period.  In ``REDUCED`` mode potentials depend on (x1, x2) only; in ``FULL``
mode on (x1, y1, x2, y2) in that axis order.

A real (1,1)-form is stored pointwise as a Hermitian 2x2 matrix
``[[a11, a12], [conj(a12), a22]]`` and always as ``constant + dd^c(potential)``.
Densities are normalized so that ``wedge2(identity) == 2`` and integrals are
plain grid averages (the torus has unit volume).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from enum import Enum
from functools import cached_property

import numpy as np

from .errors import (
    DegenerateClassError,
    GridMismatchError,
    InvalidFieldError,
    SingularMetricError,
)

TWO_PI = 2.0 * np.pi


class Mode(str, Enum):
    REDUCED = "reduced"
    FULL = "full"


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid with ``resolution`` nodes per real axis."""

    mode: Mode
    resolution: int

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        n = self.resolution
        if isinstance(n, bool) or not isinstance(n, (int, np.integer)):
            raise ValueError(f"resolution must be an integer, got {n!r}")
        if n < 8 or n & (n - 1):
            raise ValueError(f"resolution must be a power of two >= 8, got {n}")
        object.__setattr__(self, "resolution", int(n))

    @property
    def ndim(self) -> int:
        return 2 if self.mode is Mode.REDUCED else 4

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.resolution,) * self.ndim

    @property
    def spacing(self) -> float:
        return 1.0 / self.resolution

    @property
    def axis_names(self) -> tuple[str, ...]:
        if self.mode is Mode.REDUCED:
            return ("x1", "x2")
        return ("x1", "y1", "x2", "y2")

    def coordinates(self) -> tuple[np.ndarray, ...]:
        x = np.arange(self.resolution) * self.spacing
        return tuple(np.meshgrid(*([x] * self.ndim), indexing="ij"))

    def coordinate(self, name: str) -> np.ndarray:
        return self.coordinates()[self.axis_names.index(name)]

    # -- spectral machinery -------------------------------------------------

    @cached_property
    def wavenumbers(self) -> tuple[np.ndarray, ...]:
        """Angular wavenumbers per axis, shaped for broadcasting against rfftn output.

        The Nyquist wavenumber is zeroed on every axis so that all derivative
        multipliers are odd/even consistently and discrete integration by
        parts holds exactly.
        """
        n = self.resolution
        full = TWO_PI * np.fft.fftfreq(n, d=1.0 / n)
        full[n // 2] = 0.0
        half = TWO_PI * np.fft.rfftfreq(n, d=1.0 / n)
        half[-1] = 0.0
        out = []
        for axis in range(self.ndim):
            k = half if axis == self.ndim - 1 else full
            shape = [1] * self.ndim
            shape[axis] = k.size
            out.append(k.reshape(shape))
        return tuple(out)

    @cached_property
    def ddc_multipliers(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray | None]:
        """Fourier multipliers for (a11, a22, Re a12, Im a12) of dd^c."""
        k = self.wavenumbers
        if self.mode is Mode.REDUCED:
            k1, k2 = k
            return (-0.25 * k1 * k1, -0.25 * k2 * k2, -0.25 * k1 * k2, None)
        kx1, ky1, kx2, ky2 = k
        m11 = -0.25 * (kx1 * kx1 + ky1 * ky1)
        m22 = -0.25 * (kx2 * kx2 + ky2 * ky2)
        m12r = -0.25 * (kx1 * kx2 + ky1 * ky2)
        # (i/4)(d_y1 d_x2 - d_x1 d_y2)
        m12i = -0.25 * (ky1 * kx2 - kx1 * ky2)
        return (m11, m22, m12r, m12i)

    @cached_property
    def ddc_stack(self) -> np.ndarray:
        """The dd^c multipliers stacked along a leading axis (3 in REDUCED, 4 in FULL)."""
        return np.stack([np.broadcast_to(m, self.shape[:-1] + (self.resolution // 2 + 1,))
                         for m in self.ddc_multipliers if m is not None])

    @cached_property
    def differentiation_matrices(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense spectral first/second derivative matrices along one axis (Nyquist zeroed)."""
        n = self.resolution
        k = TWO_PI * np.fft.fftfreq(n, d=1.0 / n)
        k[n // 2] = 0.0
        eye = np.eye(n)
        d1 = np.ascontiguousarray(np.fft.ifft(1j * k[:, None] * np.fft.fft(eye, axis=0), axis=0).real)
        d2 = np.ascontiguousarray(np.fft.ifft(-(k * k)[:, None] * np.fft.fft(eye, axis=0), axis=0).real)
        return d1, d2

    @cached_property
    def _ddc_matrices(self):
        d1, d2 = self.differentiation_matrices
        return 0.25 * d2, np.ascontiguousarray(0.25 * d2.T), 0.5 * d1, np.ascontiguousarray(0.5 * d1.T)

    def ddc_components(self, values: np.ndarray) -> np.ndarray:
        """Real arrays (a11, a22, Re a12[, Im a12]) of dd^c applied to raw node values."""
        if self.mode is Mode.REDUCED and self.resolution <= 128:
            # Dense matrices beat FFTs at these sizes.
            q2, q2t, h1, h1t = self._ddc_matrices
            out = np.empty((3,) + self.shape)
            np.matmul(q2, values, out=out[0])
            np.matmul(values, q2t, out=out[1])
            np.matmul(h1 @ values, h1t, out=out[2])
            return out
        coeffs = np.fft.rfftn(values)
        axes = tuple(range(1, self.ndim + 1))
        return np.fft.irfftn(coeffs[None] * self.ddc_stack, s=self.shape, axes=axes)

    @cached_property
    def nyquist_mask(self) -> np.ndarray:
        """True on rfftn coefficients that carry a Nyquist index on some axis."""
        n = self.resolution
        mask = np.zeros(self.shape[:-1] + (n // 2 + 1,), dtype=bool)
        for axis in range(self.ndim):
            idx = [slice(None)] * self.ndim
            idx[axis] = n // 2
            mask[tuple(idx)] = True
        return mask

    def fft(self, values: np.ndarray) -> np.ndarray:
        return np.fft.rfftn(values)

    def ifft(self, coeffs: np.ndarray) -> np.ndarray:
        return np.fft.irfftn(coeffs, s=self.shape, axes=tuple(range(self.ndim)))

    # -- field constructors -------------------------------------------------

    def zeros(self) -> "ScalarField":
        return ScalarField(self, np.zeros(self.shape))

    def constant(self, value: float) -> "ScalarField":
        return ScalarField(self, np.full(self.shape, float(value)))

    def fourier(self, modes) -> "ScalarField":
        """Sum of ``cos * cos(2 pi k.x) + sin * sin(2 pi k.x)`` over ``modes``.

        Each mode is a mapping with integer vector ``k`` (one entry per axis)
        and optional ``cos``/``sin`` amplitudes.
        """
        xs = self.coordinates()
        total = np.zeros(self.shape)
        for mode in modes:
            k = tuple(int(v) for v in mode["k"])
            if len(k) != self.ndim:
                raise ValueError(f"mode {k} needs {self.ndim} entries for {self.mode.value} grid")
            arg = TWO_PI * sum(kj * xj for kj, xj in zip(k, xs))
            total += float(mode.get("cos", 0.0)) * np.cos(arg)
            total += float(mode.get("sin", 0.0)) * np.sin(arg)
        return ScalarField(self, total)

    def random_potential(self, rng: np.random.Generator, band: int | None = None,
                         amplitude: float = 1.0) -> "ScalarField":
        """Random mean-zero real field using only wavenumbers ``|k_i| < band``.

        ``band`` defaults to ``resolution // 4`` so that triple products stay
        alias-free.  The result is scaled to sup-norm ``amplitude``.
        """
        band = self.resolution // 4 if band is None else band
        if not 1 <= band <= self.resolution // 4:
            raise ValueError(f"band must lie in [1, {self.resolution // 4}], got {band}")
        coeffs = np.zeros(self.shape[:-1] + (self.resolution // 2 + 1,), dtype=complex)
        ranges = [np.arange(-band + 1, band)] * (self.ndim - 1) + [np.arange(band)]
        for idx in itertools.product(*ranges):
            if all(i == 0 for i in idx):
                continue
            c = (rng.standard_normal() + 1j * rng.standard_normal()) / (1.0 + sum(i * i for i in idx))
            coeffs[idx] = c
        values = self.ifft(coeffs)
        peak = np.max(np.abs(values))
        return ScalarField(self, values * (amplitude / peak))


class ScalarField:
    """Real periodic function sampled at the nodes of a :class:`Grid`."""

    __slots__ = ("grid", "values")

    def __init__(self, grid: Grid, values, check: bool = True):
        values = np.asarray(values, dtype=float)
        if values.shape != grid.shape:
            raise InvalidFieldError(f"values of shape {values.shape} do not match grid {grid.shape}")
        if check and not np.all(np.isfinite(values)):
            raise InvalidFieldError("field contains non-finite values")
        self.grid = grid
        self.values = values

    def _coerce(self, other):
        if isinstance(other, ScalarField):
            _same_grid(self, other)
            return other.values
        return other

    def __add__(self, other):
        return ScalarField(self.grid, self.values + self._coerce(other), check=False)

    __radd__ = __add__

    def __sub__(self, other):
        return ScalarField(self.grid, self.values - self._coerce(other), check=False)

    def __rsub__(self, other):
        return ScalarField(self.grid, self._coerce(other) - self.values, check=False)

    def __mul__(self, other):
        return ScalarField(self.grid, self.values * self._coerce(other), check=False)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return ScalarField(self.grid, self.values / self._coerce(other), check=False)

    def __neg__(self):
        return ScalarField(self.grid, -self.values, check=False)

    def mean(self) -> float:
        return float(np.mean(self.values))

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def max(self) -> float:
        return float(np.max(self.values))

    def min(self) -> float:
        return float(np.min(self.values))

    def centered(self) -> "ScalarField":
        return self - self.mean()

    def __repr__(self):
        return f"ScalarField({self.grid.mode.value}, n={self.grid.resolution}, mean={self.mean():.3g})"


@dataclass(frozen=True)
class ClassVector:
    """Constant Hermitian matrix representing the cohomology class of a (1,1)-form."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex).reshape(2, 2)
        if not np.allclose(m, m.conj().T, rtol=0, atol=1e-14):
            raise ValueError("class matrix must be Hermitian")
        object.__setattr__(self, "matrix", m)

    def square(self) -> float:
        """[A]^2 in the normalization wedge2(identity) = 2."""
        m = self.matrix
        return float(2.0 * (m[0, 0] * m[1, 1] - abs(m[0, 1]) ** 2).real)

    def pair(self, other: "ClassVector") -> float:
        a, b = self.matrix, other.matrix
        value = a[0, 0] * b[1, 1] + a[1, 1] * b[0, 0] - a[0, 1] * np.conj(b[0, 1]) - np.conj(a[0, 1]) * b[0, 1]
        return float(value.real)


def _hermitian(matrix) -> np.ndarray:
    m = np.asarray(matrix, dtype=complex)
    if m.shape != (2, 2):
        raise ValueError(f"expected a 2x2 matrix, got shape {m.shape}")
    if abs(m[0, 0].imag) > 1e-14 or abs(m[1, 1].imag) > 1e-14 or abs(m[0, 1] - np.conj(m[1, 0])) > 1e-14:
        raise ValueError("matrix is not Hermitian")
    out = m.copy()
    out[1, 0] = np.conj(out[0, 1])
    out[0, 0] = out[0, 0].real
    out[1, 1] = out[1, 1].real
    return out


class HermitianFormField:
    """Closed real (1,1)-form ``constant + dd^c(potential)`` sampled on a grid.

    ``a11`` and ``a22`` are real arrays, ``a12`` is real in REDUCED mode
    unless the constant part has a complex off-diagonal entry.
    """

    __slots__ = ("grid", "a11", "a22", "a12", "constant", "potential")

    def __init__(self, grid: Grid, a11, a22, a12, constant, potential: ScalarField | None = None):
        self.grid = grid
        self.a11 = a11
        self.a22 = a22
        self.a12 = a12
        self.constant = constant
        self.potential = potential

    @classmethod
    def from_constant(cls, grid: Grid, matrix) -> "HermitianFormField":
        m = _hermitian(matrix)
        a12 = m[0, 1] if m[0, 1].imag != 0 else m[0, 1].real
        return cls(grid, np.full(grid.shape, m[0, 0].real), np.full(grid.shape, m[1, 1].real),
                   np.full(grid.shape, a12), m, None)

    @classmethod
    def from_potential(cls, matrix, potential: ScalarField) -> "HermitianFormField":
        return cls.from_constant(potential.grid, matrix) + ddc(potential)

    @property
    def class_vector(self) -> ClassVector:
        return ClassVector(self.constant)

    def matrix_at(self, index) -> np.ndarray:
        a12 = complex(self.a12[index])
        return np.array([[self.a11[index], a12], [np.conj(a12), self.a22[index]]], dtype=complex)

    def _combine(self, other, sign):
        _same_grid(self, other)
        if self.potential is None:
            pot = None if other.potential is None else sign * other.potential
        elif other.potential is None:
            pot = self.potential
        else:
            pot = self.potential + sign * other.potential
        return HermitianFormField(self.grid, self.a11 + sign * other.a11, self.a22 + sign * other.a22,
                                  self.a12 + sign * other.a12, self.constant + sign * other.constant, pot)

    def __add__(self, other):
        return self._combine(other, 1.0)

    def __sub__(self, other):
        return self._combine(other, -1.0)

    def __mul__(self, scalar):
        s = float(scalar)
        pot = None if self.potential is None else s * self.potential
        return HermitianFormField(self.grid, s * self.a11, s * self.a22, s * self.a12, s * self.constant, pot)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __repr__(self):
        return (f"HermitianFormField({self.grid.mode.value}, n={self.grid.resolution}, "
                f"class={self.constant.tolist()}, potential={'yes' if self.potential is not None else 'no'})")


def _same_grid(a, b):
    if a.grid != b.grid:
        raise GridMismatchError(f"grid mismatch: {a.grid} vs {b.grid}")


def ddc(u: ScalarField) -> HermitianFormField:
    """Spectral dd^c u; the (j, k) entry is d^2 u / dz_j dzbar_k.

    In REDUCED mode this is a quarter of the real Hessian in (x1, x2).
    """
    if not np.all(np.isfinite(u.values)):
        raise InvalidFieldError("ddc of a non-finite field")
    grid = u.grid
    comps = grid.ddc_components(u.values)
    a12 = comps[2] if grid.mode is Mode.REDUCED else comps[2] + 1j * comps[3]
    return HermitianFormField(grid, comps[0], comps[1], a12, np.zeros((2, 2), dtype=complex), u)


def wedge2(a: HermitianFormField) -> ScalarField:
    """Density of A ^ A: ``2 det A``."""
    det = a.a11 * a.a22 - np.abs(a.a12) ** 2
    return ScalarField(a.grid, 2.0 * det, check=False)


def wedge11(a: HermitianFormField, b: HermitianFormField) -> ScalarField:
    """Density of A ^ B, the polarization of :func:`wedge2`."""
    _same_grid(a, b)
    cross = a.a12 * np.conj(b.a12)
    if np.iscomplexobj(cross):
        cross = cross.real
    return ScalarField(a.grid, a.a11 * b.a22 + a.a22 * b.a11 - 2.0 * cross, check=False)


def integrate(s: ScalarField) -> float:
    return s.mean()


def topological_constant(chi: HermitianFormField, omega: HermitianFormField) -> float:
    """c = 2 [chi].[omega] / [chi]^2."""
    chi_sq = integrate(wedge2(chi))
    if not chi_sq > 0:
        raise DegenerateClassError(f"[chi]^2 = {chi_sq} is not positive")
    return 2.0 * integrate(wedge11(chi, omega)) / chi_sq


def min_eigenvalue_field(a: HermitianFormField) -> ScalarField:
    half_trace = 0.5 * (a.a11 + a.a22)
    radius = np.sqrt(0.25 * (a.a11 - a.a22) ** 2 + np.abs(a.a12) ** 2)
    return ScalarField(a.grid, half_trace - radius, check=False)


def trace_with(metric: HermitianFormField, a: HermitianFormField) -> ScalarField:
    """Pointwise tr_g A = g^{j kbar} A_{j kbar} for a positive definite ``metric``."""
    _same_grid(metric, a)
    lam = min_eigenvalue_field(metric)
    if lam.min() <= 0:
        idx = np.unravel_index(np.argmin(lam.values), lam.values.shape)
        raise SingularMetricError(f"metric is not positive definite at node {idx} (min eig {lam.min():.3e})")
    det = metric.a11 * metric.a22 - np.abs(metric.a12) ** 2
    return ScalarField(a.grid, wedge11(metric, a).values / det, check=False)


def spectral_derivative(u: ScalarField, orders) -> ScalarField:
    """Partial derivative of ``u`` with ``orders[axis]`` derivatives along each axis."""
    grid = u.grid
    mult = 1.0
    for k, m in zip(grid.wavenumbers, orders):
        if m:
            mult = mult * (1j * k) ** m
    return ScalarField(grid, grid.ifft(grid.fft(u.values) * mult), check=False)


def derivative_norms(u: ScalarField, mask: np.ndarray | None = None, max_order: int = 3) -> list[float]:
    """Sup over ``mask`` of all partial derivatives of each order 0..max_order."""
    grid = u.grid
    mask = np.ones(grid.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask")
    norms = []
    for order in range(max_order + 1):
        best = 0.0
        for combo in itertools.combinations_with_replacement(range(grid.ndim), order):
            orders = [combo.count(axis) for axis in range(grid.ndim)]
            d = spectral_derivative(u, orders).values
            best = max(best, float(np.max(np.abs(d[mask]))))
        norms.append(best)
    return norms
