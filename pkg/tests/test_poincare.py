"""
Tests for normal frames, the linear and scaled Poincaré flows and the cocycle probes.

Run with: pytest tests/test_poincare.py -v
"""

import math

import numpy as np
import pytest

from lorenzlab.flow_core import NearSingularityError, integrate_orbit
from lorenzlab.poincare import (
    PROBE_NOTE,
    CocycleBound,
    cocycle_bound_probe,
    cocycle_sample,
    linear_poincare,
    normal_frame,
    normal_lyapunov_spectrum,
    normal_project,
    scaled_poincare,
    singularity_threshold,
)


def test_normal_frame_is_orthonormal_and_normal_to_the_flow(lorenz):
    x = np.array([1.0, 2.0, 20.0])
    frame = normal_frame(lorenz, x)
    B = frame.basis
    assert B.shape == (3, 2)
    assert B.T @ B == pytest.approx(np.eye(2), abs=1e-12)
    assert B.T @ frame.flow_dir == pytest.approx([0.0, 0.0], abs=1e-12)


def test_normal_project_removes_the_flow_component(drift_saddle):
    """On the z-axis X = e_z, so projection drops the z coordinate."""
    v = normal_project(drift_saddle, [0.0, 0.0, 3.0], [1.0, 2.0, 3.0])
    assert v == pytest.approx([1.0, 2.0, 0.0])


def test_singular_points_are_refused(lorenz):
    assert singularity_threshold(lorenz) == pytest.approx(1e-2)
    with pytest.raises(NearSingularityError):
        normal_frame(lorenz, np.zeros(3))
    with pytest.raises(NearSingularityError):
        linear_poincare(lorenz, np.zeros(3), [1.0, 0.0, 0.0], 1.0)


def test_poincare_flows_on_the_drift_saddle(drift_saddle):
    """psi_t = diag(e^{-2t}, e^t) on N = span(e_x, e_y); the speed is constant so psi* = psi."""
    x = np.array([0.0, 0.0, 0.0])
    v = np.array([1.0, 1.0, 5.0])
    w = linear_poincare(drift_saddle, x, v, 1.0, 1e-11)
    assert w == pytest.approx([math.exp(-2.0), math.e, 0.0], rel=1e-8, abs=1e-12)
    assert scaled_poincare(drift_saddle, x, v, 1.0, 1e-11) == pytest.approx(w, rel=1e-8, abs=1e-12)


def test_scaled_poincare_uses_the_speed_ratio(lorenz):
    x = np.array([1.0, 2.0, 20.0])
    sample = cocycle_sample(lorenz, x, 0.2, 1e-11)
    assert sample.matrix_psi.shape == (2, 2)
    assert sample.matrix_psi_star == pytest.approx(sample.speed_ratio * sample.matrix_psi)
    v = sample.frame_x.basis[:, 0]
    w_star = scaled_poincare(lorenz, x, v, 0.2, 1e-11)
    w = linear_poincare(lorenz, x, v, 0.2, 1e-11)
    assert np.linalg.norm(w_star) == pytest.approx(sample.speed_ratio * np.linalg.norm(w), rel=1e-6)


def test_normal_spectrum_of_the_drift_saddle(drift_saddle):
    """Both cocycles give the normal exponents {-2, 1}."""
    plain = normal_lyapunov_spectrum(drift_saddle, np.zeros(3), 10.0, 0.5, 1e-11)
    scaled = normal_lyapunov_spectrum(drift_saddle, np.zeros(3), 10.0, 0.5, 1e-11, scaled=True)
    assert np.sort(plain.exponents) == pytest.approx([-2.0, 1.0], abs=1e-6)
    assert scaled.exponents == pytest.approx(plain.exponents, abs=1e-9)
    assert plain.T == pytest.approx(10.0)


def test_normal_spectrum_validates_steps(drift_saddle):
    with pytest.raises(ValueError):
        normal_lyapunov_spectrum(drift_saddle, np.zeros(3), 1.0, 2.0)


def test_cocycle_bound_is_monotone_in_tau(lorenz, lorenz_orbit):
    small = cocycle_bound_probe(lorenz, lorenz_orbit, 0.2, 1e-9, dt=0.05, stride=200)
    large = cocycle_bound_probe(lorenz, lorenz_orbit, 0.5, 1e-9, dt=0.05, stride=200)
    assert small.bound >= 1.0
    assert large.bound >= small.bound
    assert large.note == PROBE_NOTE


def test_cocycle_bound_at_zero_tau_is_one(lorenz, lorenz_orbit):
    bound = cocycle_bound_probe(lorenz, lorenz_orbit, 0.0, stride=500)
    assert bound.bound == 1.0
    assert CocycleBound.from_dict(bound.to_dict()) == bound


def test_cocycle_bound_needs_regular_samples(saddle):
    orbit = integrate_orbit(saddle, np.zeros(2), 1.0, 0.1)
    with pytest.raises(ValueError, match="singularity threshold"):
        cocycle_bound_probe(saddle, orbit, 0.5)
