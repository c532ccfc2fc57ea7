"""
Shared fixtures: the built-in systems and a few hand-built splitting fields
whose answers are known in closed form.
"""

import numpy as np
import pytest

from lorenzlab.events import reset_event_bus
from lorenzlab.flow_core import build_system, integrate_orbit
from lorenzlab.splitting import SplittingField


@pytest.fixture(autouse=True)
def _fresh_event_bus():
    reset_event_bus()
    yield
    reset_event_bus()


@pytest.fixture
def lorenz():
    return build_system("lorenz")


@pytest.fixture
def saddle():
    return build_system("saddle")


@pytest.fixture
def saddle3():
    return build_system("saddle3")


@pytest.fixture
def drift_saddle():
    return build_system("drift_saddle")


@pytest.fixture
def rotation3():
    return build_system("rotation", omega=1.0, neutral_axis=True)


@pytest.fixture
def hopf():
    return build_system("hopf_saddle", omega=1.0, mu=0.5)


@pytest.fixture
def doubling():
    return build_system("doubling")


@pytest.fixture(scope="session")
def lorenz_orbit():
    system = build_system("lorenz")
    return integrate_orbit(system, np.ones(3), 20.0, 0.01, 1e-9, transient=10.0)


def _field(times, points, E, F, h):
    return SplittingField(times=times, points=points, E=E, F=F, h_out=h)


@pytest.fixture
def drift_field(drift_saddle):
    """The z-axis orbit of X = (-2x, y, 1) with E = e_x and F = span(e_y, e_z)."""
    h = 0.05
    orbit = integrate_orbit(drift_saddle, np.zeros(3), 20.0, h, 1e-10)
    m = len(orbit)
    E = np.broadcast_to(np.array([[1.0], [0.0], [0.0]]), (m, 3, 1)).copy()
    F = np.broadcast_to(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), (m, 3, 2)).copy()
    return orbit, _field(orbit.times.copy(), orbit.points.copy(), E, F, h)


@pytest.fixture
def rotation_field(rotation3):
    """Unit circle of the neutral rotation with E radial and F = span(tangent, e_z)."""
    h = 0.05
    orbit = integrate_orbit(rotation3, np.array([1.0, 0.0, 0.0]), 10.0, h, 1e-10)
    P = orbit.points
    radial = P / np.linalg.norm(P, axis=1, keepdims=True)
    tangent = np.column_stack([-radial[:, 1], radial[:, 0], np.zeros(len(P))])
    ez = np.broadcast_to(np.array([0.0, 0.0, 1.0]), P.shape)
    E = radial[:, :, None]
    F = np.stack([tangent, ez], axis=2)
    return orbit, _field(orbit.times.copy(), P.copy(), E, F, h)
