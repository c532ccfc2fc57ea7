"""
Tests for Pesin blocks, quasi-hyperbolic certificates, recurrences, periodic
shadowing and the horseshoe census.

Run with: pytest tests/test_shadowing.py -v
"""

import math

import numpy as np
import pytest

from lorenzlab.flow_core import flow
from lorenzlab.shadowing import (
    NewtonFailure,
    PartitionError,
    PeriodicOrbitRecord,
    PesinBlock,
    QuasiHyperbolicCertificate,
    QuasiHyperbolicFailure,
    RecurrenceSeed,
    certify_quasi_hyperbolic,
    dedupe_records,
    find_recurrences,
    gap_scaling,
    horseshoe_census,
    lorenz_itinerary,
    pesin_block,
    primitive_word,
    restricted_step_factors,
    reverify_certificate,
    shadow_periodic,
    verify_shadowing,
)


def _record(period, itinerary="", multiplicity=1):
    return PeriodicOrbitRecord(
        point=[0.0, 0.0, 0.0],
        period=period * multiplicity,
        primitive_period=period,
        multiplicity=multiplicity,
        itinerary=itinerary,
        seed_x=[0.0, 0.0, 0.0],
        seed_T=period,
        seed_gap=1e-3,
        theta_fit=[[0.0, 0.0], [period, period]],
        c_bound=0.0,
        d_bound=1.0,
        floquet=[[5.0, 0.0], [1.0, 0.0], [0.1, 0.0]],
        newton_residual=1e-12,
        newton_iterations=3,
        residual_history=[1e-3, 1e-7, 1e-12],
        segments=1,
    )


def _full_block(orbit):
    m = len(orbit)
    return PesinBlock(
        times=orbit.times.copy(),
        e_avgs=np.zeros(m),
        f_avgs=np.zeros(m),
        in_block=np.ones(m, dtype=bool),
        N0=1.0,
        N1=1,
        threshold_a=0.0,
    )


def _hopf_seed(hopf):
    x = np.array([1.0, 0.0, 0.0])
    T = 2.0 * math.pi
    gap = float(np.linalg.norm(flow(hopf, x, T, 1e-12) - x))
    return RecurrenceSeed(x=x.tolist(), T=T, gap=max(gap, 1e-14), start_time=0.0, start_index=0)


# ----- Step factors and Pesin blocks -----


def test_step_factors_of_the_drift_saddle(drift_saddle, drift_field):
    _, field = drift_field
    f = restricted_step_factors(drift_saddle, field, 1e-10)
    h = field.h_out
    assert f.RE.shape == (len(field) - 1, 1, 1)
    assert f.RF.shape == (len(field) - 1, 1, 1)
    assert np.abs(f.RE[:, 0, 0]) == pytest.approx(np.full(len(field) - 1, math.exp(-2.0 * h)), rel=1e-7)
    assert np.abs(f.RF[:, 0, 0]) == pytest.approx(np.full(len(field) - 1, math.exp(h)), rel=1e-7)
    assert f.log_norm_e(0, 20) == pytest.approx(-2.0, abs=1e-6)
    assert f.log_conorm_f(0, 20) == pytest.approx(1.0, abs=1e-6)


def test_step_factors_need_the_flow_inside_f(drift_saddle, drift_field):
    _, field = drift_field
    with pytest.raises(ValueError, match="d_F >= 2"):
        restricted_step_factors(drift_saddle, field.swapped())


def test_pesin_block_of_the_drift_saddle(drift_saddle, drift_field):
    orbit, field = drift_field
    block = pesin_block(drift_saddle, field, 1.0, -0.5, 1e-10, orbit=orbit)
    span = 20
    interior = slice(span, len(field) - span)
    assert block.e_avgs[interior] == pytest.approx(np.full(len(field) - 2 * span, -2.0), abs=1e-6)
    assert block.f_avgs[interior] == pytest.approx(np.full(len(field) - 2 * span, -1.0), abs=1e-6)
    assert block.measure == pytest.approx((len(field) - 2 * span) / len(field))
    assert np.isnan(block.e_avgs[0])
    assert block.to_dict()["block_size"] == len(field) - 2 * span


def test_neutral_rotation_has_an_empty_block(rotation3, rotation_field):
    orbit, field = rotation_field
    block = pesin_block(rotation3, field, 1.0, -0.1, 1e-10, orbit=orbit)
    assert block.measure == 0.0
    assert len(block.block_indices) == 0


def test_pesin_block_validates_windows(drift_saddle, drift_field):
    _, field = drift_field
    with pytest.raises(ValueError):
        pesin_block(drift_saddle, field, 0.0, -0.5)
    with pytest.raises(ValueError):
        pesin_block(drift_saddle, field, 0.01, -0.5)


# ----- Quasi-hyperbolic certificates -----


def test_drift_saddle_arc_is_quasi_hyperbolic(drift_saddle, drift_field):
    _, field = drift_field
    f = restricted_step_factors(drift_saddle, field, 1e-10)
    lam = math.exp(-0.9)
    cert = certify_quasi_hyperbolic(drift_saddle, f, 20, 220, 1.0, lam)
    assert isinstance(cert, QuasiHyperbolicCertificate)
    assert cert.passed
    assert cert.partition[0] == pytest.approx(field.times[20])
    assert cert.partition[-1] == pytest.approx(field.times[220])
    steps = np.diff(cert.partition)
    assert np.all(steps >= 1.0 - 1e-9) and np.all(steps <= 2.0 + 1e-9)
    for row in cert.per_step:
        assert row["step_ratio"] <= lam**2
    check = reverify_certificate(drift_saddle, cert, field, 1e-9)
    assert check["holds"]
    assert check["max_relative_drift"] < 1e-6


def test_neutral_rotation_fails_the_step_ratio_first(rotation3, rotation_field):
    _, field = rotation_field
    f = restricted_step_factors(rotation3, field, 1e-10)
    result = certify_quasi_hyperbolic(rotation3, f, 0, 100, 1.0, 0.9)
    assert isinstance(result, QuasiHyperbolicFailure)
    assert not result.passed
    assert result.condition == "step_ratio"
    assert result.k == 1
    assert result.value == pytest.approx(1.0, rel=1e-6)
    assert result.to_dict()["passed"] is False


def test_certificate_input_checks(drift_saddle, drift_field):
    _, field = drift_field
    f = restricted_step_factors(drift_saddle, field, 1e-10)
    with pytest.raises(ValueError):
        certify_quasi_hyperbolic(drift_saddle, f, 0, 100, 1.0, 1.0)
    with pytest.raises(ValueError):
        certify_quasi_hyperbolic(drift_saddle, f, 50, 10, 1.0, 0.5)
    with pytest.raises(PartitionError):
        certify_quasi_hyperbolic(drift_saddle, f, 0, 10, 1.0, 0.5)


# ----- Itineraries and recurrences -----


@pytest.mark.parametrize(
    "word, expected",
    [("LRLR", ("LR", 2)), ("RLL", ("LLR", 1)), ("RRLRRL", ("LRR", 2)), ("", ("", 1))],
)
def test_primitive_word(word, expected):
    assert primitive_word(word) == expected


def test_itineraries_are_lorenz_only(hopf):
    assert lorenz_itinerary(hopf, [1.0, 0.0, 0.0], 2.0 * math.pi) == ""


def test_recurrences_on_a_periodic_orbit(rotation3, rotation_field):
    orbit, _ = rotation_field
    seeds = find_recurrences(rotation3, orbit, _full_block(orbit), 0.05, 3.0, 1e-10)
    assert seeds
    for seed in seeds:
        assert seed.T == pytest.approx(2.0 * math.pi, abs=1e-6)
        assert seed.gap < 1e-6
    starts = [s.start_time for s in seeds]
    assert starts == sorted(starts)
    assert all(b - a >= 1.5 for a, b in zip(starts, starts[1:]))
    assert RecurrenceSeed.from_dict(seeds[0].to_dict()) == seeds[0]


def test_returns_are_minima_over_consecutive_orbit_samples(rotation3, rotation_field):
    """The start (1, 0, 0) comes closest to itself at sample 126 (t = 6.30)."""
    orbit, _ = rotation_field
    block = _full_block(orbit)
    block.in_block[:] = False
    block.in_block[[0, 124, 125, 126, 127, 128]] = True
    seeds = find_recurrences(rotation3, orbit, block, 0.05, 3.0, 1e-10)
    assert len(seeds) == 1
    assert seeds[0].start_index == 0
    assert seeds[0].T == pytest.approx(2.0 * math.pi, abs=1e-6)

    block.in_block[126] = False
    assert find_recurrences(rotation3, orbit, block, 0.05, 3.0, 1e-10) == []


def test_recurrence_stride_thins_the_starts_only(rotation3, rotation_field):
    orbit, _ = rotation_field
    thinned = find_recurrences(rotation3, orbit, _full_block(orbit), 0.05, 3.0, 1e-10, stride=4)
    assert thinned
    assert all(s.start_index % 4 == 0 for s in thinned)
    with pytest.raises(ValueError):
        find_recurrences(rotation3, orbit, _full_block(orbit), 0.05, 3.0, stride=0)


def test_recurrences_with_non_positive_delta_are_empty(rotation3, rotation_field):
    orbit, _ = rotation_field
    assert find_recurrences(rotation3, orbit, _full_block(orbit), 0.0, 3.0) == []


# ----- Periodic shadowing -----


def test_exact_seed_on_the_hopf_cycle(hopf):
    record = shadow_periodic(hopf, _hopf_seed(hopf), 1e-9)
    assert record.period == pytest.approx(2.0 * math.pi, abs=1e-8)
    assert record.newton_iterations == 0
    assert record.itinerary == ""
    assert math.isfinite(record.d_bound)
    mult = record.multipliers()
    assert np.abs(mult[0]) == pytest.approx(math.exp(math.pi), rel=1e-6)
    assert abs(mult[1] - 1.0) < 1e-6
    assert np.abs(mult[2]) == pytest.approx(math.exp(-4.0 * math.pi), rel=1e-3)
    report = verify_shadowing(record, 0.1)
    assert report.passed, report.items
    assert set(report.items) == {"a", "b", "c", "d", "e"}


def test_short_seed_waives_certification(hopf):
    record = shadow_periodic(hopf, _hopf_seed(hopf), 1e-9, T0=10.0)
    assert record.certification_waived
    assert PeriodicOrbitRecord.from_dict(record.to_dict()).certification_waived


def test_displaced_seeds_converge_back_to_the_cycle(hopf):
    base = shadow_periodic(hopf, _hopf_seed(hopf), 1e-9)
    ratios = gap_scaling(hopf, base, [1e-3, 1e-4, 1e-5], tol=1e-9)
    assert [r[0] for r in ratios] == [1e-3, 1e-4, 1e-5]
    values = [r[1] for r in ratios]
    assert all(math.isfinite(v) and v > 0 for v in values)
    assert max(values) / min(values) <= 3.0
    assert verify_shadowing(base, 0.1).items["d"]["passed"]


def test_newton_failure_carries_the_residual_history(saddle3):
    """A seed that is not already periodic fails when no Newton steps are allowed."""
    seed = RecurrenceSeed(x=[0.1, 0.1, 0.1], T=1.0, gap=0.5, start_time=0.0, start_index=0)
    with pytest.raises(NewtonFailure) as info:
        shadow_periodic(saddle3, seed, max_iter=0)
    assert len(info.value.residual_history) == 1
    assert info.value.residual_history[0] > 0.1


def test_verification_flags_non_hyperbolic_multipliers():
    record = _record(2.0)
    record.floquet = [[1.0, 0.0], [1.0005, 0.0], [0.2, 0.0]]
    report = verify_shadowing(record, 0.1)
    assert not report.items["e"]["passed"]
    assert not report.passed


# ----- Census -----


def test_census_recovers_planted_growth():
    records = [_record(0.5 + 1e-3 * i, f"a{i}") for i in range(2)]
    for j in range(2, 7):
        records += [_record(j - 0.5 + 1e-3 * i, f"w{j}-{i}") for i in range(2 ** (j - 1))]
    census = horseshoe_census(records, 6.0, T_grid=[1, 2, 3, 4, 5, 6])
    assert census.counts == [2, 4, 8, 16, 32, 64]
    assert census.rate == pytest.approx(math.log(2.0))
    assert not census.insufficient
    assert len(census.rows()) == 6
    assert census.itineraries == 64


def test_census_needs_three_populated_points():
    census = horseshoe_census([_record(5.5, "LR")], 6.0, points=6)
    assert census.insufficient
    assert census.rate == 0.0
    with pytest.raises(ValueError):
        horseshoe_census([], 0.0)


def test_census_counts_itineraries_up_to_the_horizon():
    records = [_record(1.5587, "LR"), _record(1.59, "LR"), _record(2.3059, "LLR"), _record(7.0, "LLLR"), _record(3.0, "")]
    census = horseshoe_census(records, 6.0)
    assert census.counts[-1] == 4
    assert census.itineraries == 2
    assert census.to_dict()["itineraries"] == 2


def test_dedupe_collapses_repeats_of_the_same_orbit():
    records = [_record(1.5, "LR"), _record(1.5, "LR", multiplicity=2), _record(1.5, "LLR")]
    kept = dedupe_records(records)
    assert len(kept) == 2
