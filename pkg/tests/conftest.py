import numpy as np
import pytest

from shrinkeig import geometry as geo
from shrinkeig import identities as ids
from shrinkeig.weighted_forms import assemble_surface_forms

# lines appended by test_acceptance, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def circle512():
    mesh = geo.make_sphere(1, segments=512)
    return mesh, assemble_surface_forms(mesh)


@pytest.fixture(scope="session")
def circle64():
    mesh = geo.make_sphere(1, segments=64)
    return mesh, assemble_surface_forms(mesh)


@pytest.fixture(scope="session")
def sphere_r2():
    mesh = geo.make_sphere(2, 2)
    return mesh, assemble_surface_forms(mesh)


@pytest.fixture(scope="session")
def small_coupled():
    """Circle with 64 segments inside the disc of radius 6, alpha = 0.1."""
    surface, ambient, system = ids.circle_in_disc(64, alpha=0.1)
    return surface, ambient, system


@pytest.fixture
def rng():
    return np.random.default_rng(20261015)
