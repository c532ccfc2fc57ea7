"""
Tests for Lyapunov spectra, Oseledets splittings and the domination certificates.

Run with: pytest tests/test_splitting.py -v
"""

import math

import numpy as np
import pytest

from lorenzlab.flow_core import build_system, integrate_orbit
from lorenzlab.splitting import (
    CoverageError,
    DominationCertificate,
    LyapunovSpectrum,
    attraction_probe,
    check_dominated_splitting,
    check_projected_domination,
    check_sectional_expansion,
    grassmann_grid,
    lorenz_like_checklist,
    lyapunov_spectrum,
    max_principal_angle,
    oseledets_directions,
    search_domination_step,
    singularity_analysis,
    sphere_grid,
    volume_hyperbolicity,
)


# ----- Lyapunov spectrum -----


def test_saddle_spectrum_is_exact(saddle):
    spec = lyapunov_spectrum(saddle, [0.0, 0.0], 100.0, 1.0, 1e-10)
    assert spec.exponents == pytest.approx([1.0, -2.0], abs=1e-6)
    assert spec.zero_index == 0
    assert spec.converged
    assert spec.drift.shape == (2,)
    assert spec.sum_residual == pytest.approx(0.0, abs=1e-6)


def test_lorenz_exponents_sum_to_the_divergence(lorenz):
    """Volume contraction is constant, so the exponent sum is -(sigma + 1 + b) at any T."""
    spec = lyapunov_spectrum(lorenz, np.ones(3), 20.0, 0.2, 1e-9, transient=5.0)
    assert np.sum(spec.exponents) == pytest.approx(-(11.0 + 8.0 / 3.0), rel=1e-5)
    assert list(spec.exponents) == sorted(spec.exponents, reverse=True)
    assert spec.divergence_mean == pytest.approx(-(11.0 + 8.0 / 3.0))


def test_lyapunov_history_and_round_trip(saddle):
    spec = lyapunov_spectrum(saddle, [0.0, 0.0], 100.0, 1.0, keep_history=True)
    assert len(spec.history) == 100
    back = LyapunovSpectrum.from_dict(spec.to_dict())
    assert back.exponents == pytest.approx(spec.exponents)
    assert back.zero_index == spec.zero_index
    assert back.drift == pytest.approx(spec.drift)


def test_lyapunov_rejects_bad_steps(saddle):
    with pytest.raises(ValueError):
        lyapunov_spectrum(saddle, [0.0, 0.0], 1.0, 2.0)
    with pytest.raises(ValueError, match="100 renormalization steps"):
        lyapunov_spectrum(saddle, [0.0, 0.0], 50.0, 1.0)


def test_doubling_map_exponent(doubling):
    spec = lyapunov_spectrum(doubling, [0.1], 100, 1)
    assert spec.exponents == pytest.approx([math.log(2.0)])
    assert spec.zero_index is None


# ----- Oseledets directions -----


def test_max_principal_angle():
    A = np.eye(3)[:, :1]
    B = np.array([[1.0], [1.0], [0.0]]) / math.sqrt(2.0)
    assert float(max_principal_angle(A, B)) == pytest.approx(math.pi / 4)
    assert float(max_principal_angle(A, A)) == pytest.approx(0.0, abs=1e-12)


def test_oseledets_directions_of_the_drift_saddle(drift_saddle):
    orbit = integrate_orbit(drift_saddle, np.zeros(3), 40.0, 0.1, 1e-10)
    field = oseledets_directions(drift_saddle, orbit, 2, lookback=2.0, tol=1e-10)
    assert field.d_E == 1 and field.d_F == 2
    assert field.max_angle_change < 0.01
    F_ref = np.broadcast_to(np.eye(3)[:, 1:], field.F.shape)
    E_ref = np.broadcast_to(np.eye(3)[:, :1], field.E.shape)
    assert np.max(max_principal_angle(field.F, F_ref)) < 1e-5
    assert np.max(max_principal_angle(field.E, E_ref)) < 1e-5
    # the field lives on orbit samples, away from both ends
    assert orbit.index_of(float(field.times[0])) is not None
    assert field.times[0] > orbit.times[0] and field.times[-1] < orbit.times[-1]


def test_oseledets_rejects_short_orbits_and_bad_dimensions(drift_saddle):
    orbit = integrate_orbit(drift_saddle, np.zeros(3), 2.0, 0.1)
    with pytest.raises(ValueError, match="too short"):
        oseledets_directions(drift_saddle, orbit, 2, lookback=2.0)
    with pytest.raises(ValueError):
        oseledets_directions(drift_saddle, orbit, 3)


def test_splitting_field_helpers(drift_field):
    orbit, field = drift_field
    assert len(field) == len(orbit)
    sw = field.swapped()
    assert sw.d_E == 2 and sw.d_F == 1
    win = field.window(5, 15)
    assert len(win) == 10
    assert win.index_of(float(field.times[7])) == 2
    assert field.summary()["samples"] == len(field)


# ----- Grids -----


def test_sphere_and_grassmann_grids_are_deterministic():
    a, b = sphere_grid(3, 32), sphere_grid(3, 32)
    assert np.array_equal(a, b)
    assert np.linalg.norm(a, axis=1) == pytest.approx(np.ones(32))
    assert sphere_grid(1, 8).shape == (2, 1)
    planes = grassmann_grid(4, 10)
    assert len(planes) == 10
    for P in planes:
        assert P.T @ P == pytest.approx(np.eye(2), abs=1e-12)
    assert len(grassmann_grid(2, 64)) == 1


# ----- Domination -----


def test_drift_saddle_splitting_is_dominated(drift_saddle, drift_field):
    _, field = drift_field
    cert = check_dominated_splitting(drift_saddle, field, 1, 0.5, 1e-10, max_samples=20)
    assert cert.passed
    assert cert.worst_ratio == pytest.approx(math.exp(-2.0), rel=1e-6)
    assert cert.contraction_factor < 1.0
    assert DominationCertificate.from_dict(cert.to_dict()).passed


def test_swapped_splitting_fails_everywhere(drift_saddle, drift_field):
    _, field = drift_field
    cert = check_dominated_splitting(drift_saddle, field.swapped(), 1, 0.5, 1e-10, max_samples=20)
    assert not cert.passed
    assert cert.violation_fraction == pytest.approx(1.0)
    assert cert.witness["ratio"] == pytest.approx(math.exp(3.0), rel=1e-6)


def test_projected_domination_on_the_normal_bundle(drift_saddle, drift_field):
    _, field = drift_field
    cert = check_projected_domination(drift_saddle, field, 1, 0.3, 1e-10, max_samples=10)
    assert cert.passed
    assert cert.aperture == pytest.approx(0.6)
    assert cert.worst_ratio == pytest.approx(math.exp(-3.0), rel=1e-6)


def test_neutral_rotation_is_not_dominated(rotation3, rotation_field):
    _, field = rotation_field
    search = search_domination_step(rotation3, field, 0.5, 1e-10, L_max=3, max_samples=10)
    assert search.verdict == "inconclusive"
    assert search.L is None
    assert len(search.tried) == 3
    assert search.tried[0].worst_ratio == pytest.approx(1.0, rel=1e-6)


def test_domination_search_stops_at_the_first_pass(drift_saddle, drift_field):
    _, field = drift_field
    search = search_domination_step(drift_saddle, field, 0.5, 1e-10, L_max=5, max_samples=10)
    assert search.verdict == "pass"
    assert search.L == 1
    assert len(search.tried) == 1


def test_domination_reports_missing_images(drift_saddle, drift_field):
    _, field = drift_field
    with pytest.raises(CoverageError) as info:
        check_dominated_splitting(drift_saddle, field, 1, 0.5, sample_idx=[0, len(field) - 1])
    assert info.value.missing == [len(field) - 1]
    with pytest.raises(ValueError):
        check_dominated_splitting(drift_saddle, field, 1, 1.5)


# ----- Sectional and volume expansion -----


def test_sectional_expansion_of_a_linear_plane(saddle3):
    F = np.eye(3)[:, 1:]
    cert = check_sectional_expansion(saddle3, [[0.1, 0.1, 0.1]], F, [0.5, 1.0, 1.5, 2.0], 1e-10)
    assert cert.plane_count == 1
    assert cert.worst_plane_rate == pytest.approx(3.0, rel=1e-6)
    assert cert.passed


def test_contracting_plane_fails_sectional_expansion(saddle3):
    F = np.eye(3)[:, :2]
    cert = check_sectional_expansion(saddle3, [[0.1, 0.1, 0.1]], F, [0.5, 1.0, 1.5], 1e-10)
    assert cert.worst_plane_rate == pytest.approx(-2.0, rel=1e-6)
    assert not cert.passed
    with pytest.raises(ValueError):
        check_sectional_expansion(saddle3, [[0.1, 0.1, 0.1]], F, [1.0])


def test_volume_hyperbolicity_of_the_drift_saddle(drift_saddle, drift_field):
    _, field = drift_field
    report = volume_hyperbolicity(drift_saddle, field, 3, 1e-10, max_samples=5)
    assert report.e_rate == pytest.approx(-2.0, abs=1e-6)
    assert report.f_rate == pytest.approx(1.0, abs=1e-6)
    assert report.passed


# ----- Singularities and attraction -----


def test_lorenz_origin_is_lorenz_like(lorenz):
    report = singularity_analysis(lorenz, np.zeros(3))
    root = math.sqrt(1201.0)
    assert [ev.real for ev in report.eigenvalues] == pytest.approx([(-11.0 - root) / 2, -8.0 / 3.0, (-11.0 + root) / 2])
    assert report.stable_indices == [0]
    assert report.center_indices == [1]
    assert report.unstable_indices == [2]
    assert report.hyperbolic
    assert report.min_sectional_rate == pytest.approx(9.161, abs=1e-3)
    assert report.lorenz_like


def test_lorenz_off_origin_equilibria_are_not_lorenz_like(lorenz):
    c = math.sqrt(8.0 / 3.0 * 27.0)
    report = singularity_analysis(lorenz, [c, c, 27.0])
    assert report.hyperbolic
    assert not report.lorenz_like


def test_planar_saddle_is_out_of_sectional_scope(saddle):
    report = singularity_analysis(saddle, [0.0, 0.0])
    assert report.hyperbolic
    assert not report.sectional_in_scope
    assert not report.lorenz_like


def test_neutral_rotation_is_not_hyperbolic(rotation3):
    assert not singularity_analysis(rotation3, np.zeros(3)).hyperbolic


def test_regular_point_is_not_a_singularity(lorenz):
    with pytest.raises(ValueError, match="not a singularity"):
        singularity_analysis(lorenz, np.ones(3))


def test_attracting_limit_cycle_absorbs_perturbations():
    system = build_system("hopf_saddle", omega=1.0, mu=-1.0)
    orbit = integrate_orbit(system, [1.0, 0.0, 0.0], 2.0 * math.pi, 0.05, 1e-10)
    report = attraction_probe(system, orbit.points, 0.1, 10.0, 1e-9, rng=np.random.default_rng(1), samples=32)
    assert report.absorbed
    assert report.final_max < 0.05


def test_checklist_needs_every_ingredient(lorenz):
    sing = [singularity_analysis(lorenz, np.zeros(3))]
    partial = lorenz_like_checklist(sing, None, None, None)
    assert partial["singularities_lorenz_like"] is True
    assert partial["attracting"] is None
    assert partial["lorenz_like"] is False
