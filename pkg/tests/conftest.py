import numpy as np
import pytest

from jflow.geometry import Grid, HermitianFormField, Mode, ScalarField


def const_form(grid, matrix):
    return HermitianFormField.from_constant(grid, np.asarray(matrix, dtype=complex))


def identity(grid, scale=1.0):
    return const_form(grid, scale * np.eye(2))


def cos_x1(grid, amplitude=1.0, k=1):
    return ScalarField(grid, amplitude * np.cos(2 * np.pi * k * grid.coordinate("x1")))


@pytest.fixture
def grid16():
    return Grid(Mode.REDUCED, 16)


@pytest.fixture
def grid32():
    return Grid(Mode.REDUCED, 32)


@pytest.fixture
def full8():
    return Grid(Mode.FULL, 8)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS, summary_lines

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in summary_lines():
            terminalreporter.write_line(line)
