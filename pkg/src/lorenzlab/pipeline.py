"""
Stage registry and runner.

Each stage reads what earlier stages left in ``StageContext.state``, writes its
artifacts into the run directory and returns a ``StageResult``. The runner
stops at the first failing gate, writes ``<stage>.witness.json`` for it, and
maps the outcome to an exit code.
"""

from __future__ import annotations

import logging
import math
import os
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from lorenzlab import __version__
from lorenzlab.config import ExperimentConfig, StageName, config_hash, dump_config
from lorenzlab.entropy import (
    MeshRefinementError,
    disk_volume_expansion,
    entropy_estimate,
    expansiveness_probe,
    seed_disk,
    tangent_check,
)
from lorenzlab.events import (
    EVENT_ARTIFACT_WRITTEN,
    EVENT_GATE_FAILED,
    EVENT_RUN_FINISHED,
    EVENT_RUN_STARTED,
    EVENT_STAGE_FINISHED,
    EVENT_STAGE_STARTED,
    Event,
    EventBus,
    get_event_bus,
)
from lorenzlab.flow_core import (
    DivergenceError,
    FlowSystem,
    NearSingularityError,
    OrbitSegment,
    build_system,
    integrate_orbit,
)
from lorenzlab.parallel import thread_map
from lorenzlab.poincare import cocycle_bound_probe, normal_lyapunov_spectrum
from lorenzlab.shadowing import (
    NewtonFailure,
    PartitionError,
    RecurrenceSeed,
    certify_quasi_hyperbolic,
    find_recurrences,
    gap_scaling,
    horseshoe_census,
    pesin_block,
    primitive_word,
    restricted_step_factors,
    reverify_certificate,
    shadow_periodic,
    verify_shadowing,
)
from lorenzlab.splitting import (
    CoverageError,
    NoDominationError,
    SplittingField,
    attraction_probe,
    check_dominated_splitting,
    check_projected_domination,
    check_sectional_expansion,
    lorenz_like_checklist,
    lyapunov_spectrum,
    oseledets_directions,
    search_domination_step,
    singularity_analysis,
    step_cocycles,
    volume_hyperbolicity,
)
from lorenzlab.store import (
    RunManifest,
    RunPaths,
    StageRecord,
    append_event,
    init_run_dir,
    resolve_run_paths,
    save_manifest,
    write_array_csv,
    write_csv,
    write_json,
    write_mesh,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_GATE = 1
EXIT_INPUT = 2
EXIT_BUDGET = 3

# Numerical failures that count as a failed gate rather than bad input.
DOMAIN_ERRORS = (
    DivergenceError,
    NearSingularityError,
    NoDominationError,
    CoverageError,
    PartitionError,
    MeshRefinementError,
    NewtonFailure,
)


class BudgetExceeded(RuntimeError):
    def __init__(self, message: str, *, partial: Any = None) -> None:
        super().__init__(message)
        self.partial = partial


@dataclass
class StageResult:
    passed: Optional[bool] = None
    summary: dict[str, Any] = field(default_factory=dict)
    witness: Optional[dict[str, Any]] = None


@dataclass
class StageContext:
    name: str
    config: ExperimentConfig
    system: FlowSystem
    paths: RunPaths
    params: dict[str, Any]
    rng: np.random.Generator
    state: dict[str, Any]
    run_id: str
    bus: EventBus
    artifacts: list[str] = field(default_factory=list)

    @property
    def tol(self) -> float:
        return self.config.tol

    @property
    def threads(self) -> int:
        return self.config.threads or os.cpu_count() or 1

    def options(self, **defaults: Any) -> dict[str, Any]:
        """Stage parameters over ``defaults``; unknown keys are input errors."""
        unknown = sorted(set(self.params) - set(defaults))
        if unknown:
            raise ValueError(f"stage '{self.name}' got unknown parameters: {', '.join(unknown)}")
        return {**defaults, **self.params}

    def need(self, key: str) -> Any:
        try:
            return self.state[key]
        except KeyError:
            raise ValueError(f"stage '{self.name}' needs '{key}' from an earlier stage") from None

    # ----- Artifact writers -----

    def _written(self, name: str) -> None:
        self.artifacts.append(name)
        self.bus.emit(EVENT_ARTIFACT_WRITTEN, self.run_id, stage=self.name, path=name)

    def json(self, data: Any, name: Optional[str] = None) -> str:
        name = name or f"{self.name}.json"
        write_json(self.paths.artifact(name), data)
        self._written(name)
        return name

    def csv(self, rows: list[dict[str, Any]], name: str, columns: Optional[list[str]] = None) -> str:
        write_csv(self.paths.artifact(name), rows, columns)
        self._written(name)
        return name

    def array_csv(self, array: np.ndarray, name: str, columns: list[str]) -> str:
        write_array_csv(self.paths.artifact(name), array, columns)
        self._written(name)
        return name

    def mesh(self, mesh: Any, name: str) -> str:
        write_mesh(self.paths.artifact(name), mesh)
        self._written(name)
        return name

    def witness(self, data: dict[str, Any]) -> str:
        return self.json(data, f"{self.name}.witness.json")


StageFn = Callable[[StageContext], StageResult]
STAGES: dict[StageName, StageFn] = {}


def stage(name: StageName) -> Callable[[StageFn], StageFn]:
    def register(fn: StageFn) -> StageFn:
        STAGES[name] = fn
        return fn

    return register


def stage_rng(seed: int, name: str) -> np.random.Generator:
    """Independent stream per stage so inserting a stage never shifts another's draws."""
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


# ----- Shared helpers -----


def start_point(ctx: StageContext) -> np.ndarray:
    if ctx.config.x0 is not None:
        x0 = np.asarray(ctx.config.x0, dtype=float)
        if x0.shape != (ctx.system.dim,):
            raise ValueError(f"x0 must have {ctx.system.dim} coordinates, got {len(ctx.config.x0)}")
        return x0
    name, dim = ctx.system.name, ctx.system.dim
    if name == "lorenz":
        return np.ones(3)
    if name in ("hopf_saddle", "rotation"):
        return np.eye(dim)[0]
    if ctx.system.discrete:
        return np.full(dim, 0.1)
    return np.zeros(dim)


def _latest_point(ctx: StageContext) -> np.ndarray:
    orbit: Optional[OrbitSegment] = ctx.state.get("orbit")
    return orbit.points[-1].copy() if orbit is not None else start_point(ctx)


def equilibria(system: FlowSystem) -> list[np.ndarray]:
    """Known zeros of X for the built-in systems."""
    if system.discrete:
        return []
    if system.name == "lorenz":
        b, r = float(system.params["b"]), float(system.params["r"])
        points = [np.zeros(3)]
        if r > 1:
            c = math.sqrt(b * (r - 1.0))
            points += [np.array([c, c, r - 1.0]), np.array([-c, -c, r - 1.0])]
        return points
    if "A" in system.params:
        A = np.asarray(system.params["A"], dtype=float)
        b = np.asarray(system.params.get("b") or np.zeros(system.dim), dtype=float)
        try:
            return [np.linalg.solve(A, -b)]
        except np.linalg.LinAlgError:
            return []
    return [np.zeros(system.dim)]


def sample_set(ctx: StageContext, size: int, box: Optional[list[float]] = None) -> np.ndarray:
    """Orbit samples when an orbit exists, else a uniform box for discrete maps."""
    cap = ctx.config.budgets.max_samples
    if cap is not None:
        size = min(size, cap)
    orbit: Optional[OrbitSegment] = ctx.state.get("orbit")
    if orbit is not None:
        if size >= len(orbit):
            return orbit.points.copy()
        pick = np.sort(ctx.rng.choice(len(orbit), size=size, replace=False))
        return orbit.points[pick]
    if ctx.system.discrete:
        lo, hi = box if box is not None else (0.0, ctx.system.period or 1.0)
        return ctx.rng.uniform(lo, hi, size=(size, ctx.system.dim))
    raise ValueError(f"stage '{ctx.name}' needs an orbit stage first for a flow system")


def _field_indices(fld: SplittingField, count: int) -> np.ndarray:
    return np.unique(np.linspace(0, len(fld) - 1, min(count, len(fld))).round().astype(int))


# ----- Stages -----


@stage(StageName.ORBIT)
def _orbit(ctx: StageContext) -> StageResult:
    o = ctx.options(duration=200.0, h_out=0.01, transient=0.0, write_samples=True)
    orbit = integrate_orbit(ctx.system, start_point(ctx), o["duration"], o["h_out"], ctx.tol, transient=o["transient"])
    ctx.state["orbit"] = orbit
    if o["write_samples"]:
        columns = ["t"] + [f"x{i}" for i in range(ctx.system.dim)]
        ctx.array_csv(np.column_stack([orbit.times, orbit.points]), "orbit.csv", columns)
    speeds = np.linalg.norm(ctx.system.field(orbit.points), axis=-1)
    summary = {
        **orbit.to_dict(),
        "duration": orbit.duration,
        "min_speed": float(np.min(speeds)),
        "max_norm": float(np.max(np.linalg.norm(orbit.points, axis=1))),
    }
    ctx.json(summary)
    return StageResult(summary=summary)


@stage(StageName.LYAPUNOV)
def _lyapunov(ctx: StageContext) -> StageResult:
    o = ctx.options(T=100.0, renorm_step=1.0, transient=0.0, sum_rtol=1e-3, zero_tol=None, expected=None, expected_tol=0.02)
    spec = lyapunov_spectrum(ctx.system, _latest_point(ctx), o["T"], o["renorm_step"], ctx.tol, transient=o["transient"])
    ctx.state["lyapunov"] = spec
    data = spec.to_dict()
    ctx.json(data)
    ctx.csv([{"index": i, "exponent": float(v)} for i, v in enumerate(spec.exponents)], "exponents.csv", ["index", "exponent"])
    checks = {"sum": spec.sum_residual <= o["sum_rtol"] * max(1.0, abs(spec.divergence_mean))}
    if o["zero_tol"] is not None and spec.zero_index is not None:
        checks["zero_exponent"] = abs(float(spec.exponents[spec.zero_index])) < o["zero_tol"]
    if o["expected"] is not None:
        expected = np.asarray(o["expected"], dtype=float)
        if expected.shape != spec.exponents.shape:
            raise ValueError(f"expected exponents need {len(spec.exponents)} values")
        checks["expected"] = bool(np.all(np.abs(spec.exponents - expected) <= o["expected_tol"]))
    passed = all(checks.values())
    summary = {"exponents": data["exponents"], "sum_residual": spec.sum_residual, "checks": checks}
    return StageResult(passed=passed, summary=summary, witness=None if passed else {**data, "checks": checks})


@stage(StageName.NORMAL_SPECTRUM)
def _normal_spectrum(ctx: StageContext) -> StageResult:
    o = ctx.options(T=100.0, step=0.5, agreement=None)
    x0 = _latest_point(ctx)
    plain = normal_lyapunov_spectrum(ctx.system, x0, o["T"], o["step"], ctx.tol, scaled=False)
    scaled = normal_lyapunov_spectrum(ctx.system, x0, o["T"], o["step"], ctx.tol, scaled=True)
    bound = o["agreement"] if o["agreement"] is not None else 2.0 / plain.T + 0.01
    difference = float(np.max(np.abs(plain.exponents - scaled.exponents)))
    data: dict[str, Any] = {
        "linear": plain.to_dict(),
        "scaled": scaled.to_dict(),
        "max_difference": difference,
        "bound": bound,
    }
    spec = ctx.state.get("lyapunov")
    if spec is not None and spec.zero_index is not None:
        reduced = np.delete(spec.exponents, spec.zero_index)
        data["flow_without_zero"] = reduced.tolist()
        data["flow_difference"] = float(np.max(np.abs(reduced - plain.exponents)))
    ctx.json(data)
    passed = difference <= bound
    return StageResult(passed=passed, summary={"max_difference": difference, "bound": bound}, witness=None if passed else data)


@stage(StageName.POINCARE_BOUND)
def _poincare_bound(ctx: StageContext) -> StageResult:
    o = ctx.options(tau=1.0, dt=0.05, stride=100, clip_speed=None, stability=0.05)
    orbit: OrbitSegment = ctx.need("orbit")
    kwargs = dict(dt=o["dt"], clip_speed=o["clip_speed"], threads=ctx.threads)
    fine = cocycle_bound_probe(ctx.system, orbit, o["tau"], ctx.tol, stride=o["stride"], **kwargs)
    coarse = cocycle_bound_probe(ctx.system, orbit, o["tau"], ctx.tol, stride=2 * o["stride"], **kwargs)
    change = abs(fine.bound - coarse.bound) / fine.bound
    data = {**fine.to_dict(), "coarse_bound": coarse.bound, "relative_change": change}
    ctx.json(data)
    passed = math.isfinite(fine.bound) and change <= o["stability"]
    return StageResult(passed=passed, summary={"bound": fine.bound, "relative_change": change}, witness=None if passed else data)


@stage(StageName.SINGULARITY)
def _singularity(ctx: StageContext) -> StageResult:
    o = ctx.options(points=None, require="hyperbolic", expected_rate=None, rate_tol=1e-3)
    if o["require"] not in ("hyperbolic", "lorenz_like", "none"):
        raise ValueError(f"require must be hyperbolic, lorenz_like or none, got {o['require']!r}")
    points = [np.asarray(p, dtype=float) for p in o["points"]] if o["points"] is not None else equilibria(ctx.system)
    reports = [singularity_analysis(ctx.system, p) for p in points]
    ctx.state["singularities"] = reports
    data = {"singularities": [r.to_dict() for r in reports]}
    ctx.json(data)
    checks: dict[str, bool] = {}
    if o["require"] == "hyperbolic":
        checks["hyperbolic"] = all(r.hyperbolic for r in reports)
    elif o["require"] == "lorenz_like":
        checks["lorenz_like"] = any(r.lorenz_like for r in reports)
    if o["expected_rate"] is not None:
        checks["sectional_rate"] = any(
            r.min_sectional_rate is not None and abs(r.min_sectional_rate - o["expected_rate"]) <= o["rate_tol"]
            for r in reports
        )
    passed = all(checks.values())
    summary = {
        "count": len(reports),
        "lorenz_like": [r.lorenz_like for r in reports],
        "min_sectional_rates": [r.min_sectional_rate for r in reports],
        "checks": checks,
    }
    return StageResult(passed=passed, summary=summary, witness=None if passed else data)


@stage(StageName.SPLITTING)
def _splitting(ctx: StageContext) -> StageResult:
    o = ctx.options(d_F=None, lookback=20.0, max_lookback=160.0, write_field=False)
    orbit: OrbitSegment = ctx.need("orbit")
    d_F = int(o["d_F"]) if o["d_F"] is not None else ctx.system.dim - 1
    mats = step_cocycles(ctx.system, orbit, ctx.tol, threads=ctx.threads)
    fld = oseledets_directions(
        ctx.system,
        orbit,
        d_F,
        o["lookback"],
        ctx.tol,
        max_lookback=o["max_lookback"],
        rng=ctx.rng,
        step_mats=mats,
        threads=ctx.threads,
    )
    ctx.state["field"] = fld
    summary = fld.summary()
    ctx.json(summary)
    if o["write_field"]:
        dim = fld.dim
        columns = (
            ["t"]
            + [f"x{i}" for i in range(dim)]
            + [f"E{i}_{j}" for i in range(dim) for j in range(fld.d_E)]
            + [f"F{i}_{j}" for i in range(dim) for j in range(fld.d_F)]
        )
        table = np.column_stack([fld.times, fld.points, fld.E.reshape(len(fld), -1), fld.F.reshape(len(fld), -1)])
        ctx.array_csv(table, "splitting.csv", columns)
    return StageResult(passed=True, summary=summary)


@stage(StageName.DOMINATION)
def _domination(ctx: StageContext) -> StageResult:
    o = ctx.options(
        aperture=0.2,
        L_max=20,
        max_samples=10000,
        grid=16,
        swapped_control=True,
        swapped_min_fraction=0.99,
        projected=True,
        require_projected=False,
    )
    fld: SplittingField = ctx.need("field")
    common = dict(max_samples=o["max_samples"], grid=o["grid"])
    search = search_domination_step(ctx.system, fld, o["aperture"], ctx.tol, L_max=o["L_max"], threads=ctx.threads, **common)
    data: dict[str, Any] = search.to_dict()
    if search.L is None:
        ctx.json(data)
        worst = search.tried[-1].to_dict() if search.tried else {}
        return StageResult(passed=False, summary={"verdict": search.verdict}, witness={"verdict": search.verdict, "last": worst})
    cert = search.tried[-1]
    ctx.state["domination"] = cert
    checks = {"domination": cert.passed}
    summary: dict[str, Any] = {
        "L": search.L,
        "worst_ratio": cert.worst_ratio,
        "violations": cert.violation_count,
        "samples": cert.sample_count,
    }
    if o["swapped_control"]:
        swapped = check_dominated_splitting(ctx.system, fld.swapped(), search.L, o["aperture"], ctx.tol, threads=ctx.threads, **common)
        data["swapped"] = swapped.to_dict()
        summary["swapped_violation_fraction"] = swapped.violation_fraction
        checks["swapped_fails"] = swapped.violation_fraction >= o["swapped_min_fraction"]
    if o["projected"] and fld.d_F >= 2 and not ctx.system.discrete:
        projected = check_projected_domination(ctx.system, fld, search.L, o["aperture"], ctx.tol, **common)
        data["projected"] = projected.to_dict()
        if o["require_projected"]:
            checks["projected"] = projected.passed
    data["checks"] = checks
    ctx.json(data)
    passed = all(checks.values())
    summary["checks"] = checks
    return StageResult(passed=passed, summary=summary, witness=None if passed else data)


@stage(StageName.SECTIONAL)
def _sectional(ctx: StageContext) -> StageResult:
    o = ctx.options(T_grid=[0.5, 1.0, 1.5, 2.0], planes=64, max_samples=200, lambda_min=1e-3, rate_tol=None)
    fld: SplittingField = ctx.need("field")
    idx = _field_indices(fld, o["max_samples"])
    cert = check_sectional_expansion(
        ctx.system,
        fld.points[idx],
        fld.F[idx],
        o["T_grid"],
        ctx.tol,
        planes=o["planes"],
        lambda_min=o["lambda_min"],
        threads=ctx.threads,
    )
    ctx.state["sectional"] = cert
    data = cert.to_dict()
    checks = {"sectional": cert.passed}
    spec = ctx.state.get("lyapunov")
    if spec is not None and len(spec.exponents) >= 2:
        target = float(spec.exponents[0] + spec.exponents[1])
        data["lyapunov_target"] = target
        if o["rate_tol"] is not None:
            checks["mean_rate"] = abs(cert.mean_rate - target) <= o["rate_tol"]
    data["checks"] = checks
    ctx.json(data)
    passed = all(checks.values())
    summary = {"worst_plane_rate": cert.worst_plane_rate, "mean_rate": cert.mean_rate, "checks": checks}
    return StageResult(passed=passed, summary=summary, witness=None if passed else data)


@stage(StageName.VOLUME)
def _volume(ctx: StageContext) -> StageResult:
    o = ctx.options(n_steps=10, max_samples=200)
    report = volume_hyperbolicity(ctx.system, ctx.need("field"), o["n_steps"], ctx.tol, max_samples=o["max_samples"])
    ctx.state["volume"] = report
    data = report.to_dict()
    ctx.json(data)
    return StageResult(passed=report.passed, summary=data, witness=None if report.passed else data)


@stage(StageName.ATTRACTION)
def _attraction(ctx: StageContext) -> StageResult:
    o = ctx.options(radius=0.5, n=10.0, samples=256, stride=10)
    orbit: OrbitSegment = ctx.need("orbit")
    report = attraction_probe(
        ctx.system, orbit.points[:: o["stride"]], o["radius"], o["n"], ctx.tol, rng=ctx.rng, samples=o["samples"]
    )
    ctx.state["attraction"] = report
    data = report.to_dict()
    ctx.json(data)
    return StageResult(passed=report.absorbed, summary=data, witness=None if report.absorbed else data)


@stage(StageName.CHECKLIST)
def _checklist(ctx: StageContext) -> StageResult:
    o = ctx.options(require=True)
    items = lorenz_like_checklist(
        ctx.state.get("singularities", []),
        ctx.state.get("attraction"),
        ctx.state.get("domination"),
        ctx.state.get("sectional"),
    )
    ctx.json(items)
    if not o["require"]:
        return StageResult(summary=items)
    return StageResult(passed=bool(items["lorenz_like"]), summary=items, witness=items)


@stage(StageName.ENTROPY)
def _entropy(ctx: StageContext) -> StageResult:
    o = ctx.options(
        eps_grid=[0.5, 0.25, 0.125],
        n_grid=[2, 4, 6, 8, 10],
        sample_size=2000,
        box=None,
        min_h_lower=None,
        max_h_upper=None,
        lower_eps=None,
    )
    K = sample_set(ctx, int(o["sample_size"]), o["box"])
    est = entropy_estimate(
        ctx.system,
        K,
        o["eps_grid"],
        o["n_grid"],
        ctx.tol,
        rng=ctx.rng,
        budget=ctx.config.budgets.max_iterates,
        threads=ctx.threads,
    )
    ctx.state["entropy"] = est
    data = est.to_dict()
    ctx.json(data)
    ctx.csv(est.rows(), "entropy.csv", ["n", "eps", "upper", "lower", "slope"])
    if "budget_exceeded" in est.flags:
        raise BudgetExceeded(f"iteration budget stopped the spanning counts at n={est.achieved_n}", partial=data)
    checks: dict[str, bool] = {}
    if o["min_h_lower"] is not None:
        checks["h_lower"] = est.h_lower > o["min_h_lower"]
    if o["max_h_upper"] is not None:
        checks["h_upper"] = est.h_upper <= o["max_h_upper"]
    floor = o["min_h_lower"] if o["min_h_lower"] is not None else 0.0
    for eps in o["lower_eps"] or []:
        try:
            checks[f"h_lower_eps={float(eps):g}"] = est.lower_slope_at(float(eps)) > floor
        except KeyError as exc:
            raise ValueError(str(exc.args[0])) from None
    passed = all(checks.values())
    summary = {"h_lower": est.h_lower, "h_upper": est.h_upper, "flags": est.flags, "checks": checks}
    return StageResult(passed=passed, summary=summary, witness=None if passed else data)


@stage(StageName.DISK_VOLUME)
def _disk_volume(ctx: StageContext) -> StageResult:
    o = ctx.options(
        radius=0.5,
        resolution=8,
        n_steps=8,
        aperture=0.2,
        index=None,
        target_edge=None,
        ball_radius=0.5,
        min_v_F=0.0,
        max_ball_slope=0.02,
        entropy_slack=0.1,
    )
    fld: SplittingField = ctx.need("field")
    i = int(o["index"]) if o["index"] is not None else len(fld) // 2
    F = fld.F[i]
    mesh = seed_disk(fld.points[i], F, o["radius"], o["resolution"])
    angle = tangent_check(mesh, F)
    ctx.mesh(mesh, "disk_seed.off")
    if angle > math.atan(o["aperture"]):
        witness = {"tangent_angle": angle, "aperture": o["aperture"], "index": i}
        return StageResult(passed=False, summary=witness, witness=witness)
    vol = disk_volume_expansion(
        ctx.system,
        mesh,
        o["n_steps"],
        ctx.tol,
        target_edge=o["target_edge"],
        max_vertices=ctx.config.budgets.max_vertices,
        ball_radius=o["ball_radius"],
        rng=ctx.rng,
    )
    ctx.state["disk_volume"] = vol
    data = {**vol.to_dict(), "tangent_angle": angle}
    checks = {"v_F": vol.v_F > o["min_v_F"], "ball_volume": vol.ball_slope < o["max_ball_slope"]}
    est = ctx.state.get("entropy")
    if est is not None:
        checks["entropy_ordering"] = est.h_upper >= vol.v_F - o["entropy_slack"]
    data["checks"] = checks
    ctx.json(data)
    rows = [
        {"n": n, "log_volume": lv, "max_ball_volume": bv}
        for n, (lv, bv) in enumerate(zip(vol.log_volumes, vol.max_ball_volumes))
    ]
    ctx.csv(rows, "disk_volume.csv", ["n", "log_volume", "max_ball_volume"])
    passed = all(checks.values())
    summary = {"v_F": vol.v_F, "ball_slope": vol.ball_slope, "saturated": vol.saturated, "checks": checks}
    return StageResult(passed=passed, summary=summary, witness=None if passed else data)


@stage(StageName.EXPANSIVENESS)
def _expansiveness(ctx: StageContext) -> StageResult:
    o = ctx.options(
        delta=0.1,
        n_max=40,
        eps_inner=0.02,
        points=100,
        samples=500,
        collapse_max=0.02,
        slope_max=0.05,
        min_fraction=0.95,
    )
    centers = sample_set(ctx, int(o["points"]))
    seeds = ctx.rng.integers(0, 2**32, size=len(centers))

    def probe(k: int) -> Any:
        return expansiveness_probe(
            ctx.system,
            centers[k],
            o["delta"],
            o["n_max"],
            o["eps_inner"],
            ctx.tol,
            samples=o["samples"],
            rng=np.random.default_rng(int(seeds[k])),
        )

    probes = thread_map(probe, range(len(centers)), ctx.threads)
    rows = [
        {
            **{f"x{i}": float(c) for i, c in enumerate(centers[k])},
            "slope": p.slope,
            "collapse": p.collapse,
            "escape_rate": p.escape_rate,
            "low_confidence": p.low_confidence,
        }
        for k, p in enumerate(probes)
    ]
    ctx.csv(rows, "expansiveness.csv")
    collapsed = float(np.mean([p.collapse <= o["collapse_max"] for p in probes]))
    max_slope = float(max(p.slope for p in probes))
    checks = {"collapse": collapsed >= o["min_fraction"], "slope": max_slope < o["slope_max"]}
    data = {
        "collapsed_fraction": collapsed,
        "max_slope": max_slope,
        "mean_slope": float(np.mean([p.slope for p in probes])),
        "delta": o["delta"],
        "n_max": o["n_max"],
        "points": len(probes),
        "note": probes[0].note if probes else "",
        "checks": checks,
    }
    ctx.json(data)
    passed = all(checks.values())
    worst = int(np.argmax([p.collapse for p in probes]))
    witness = None if passed else {**data, "worst": probes[worst].to_dict(), "worst_center": centers[worst].tolist()}
    return StageResult(passed=passed, summary=data, witness=witness)


@stage(StageName.PESIN)
def _pesin(ctx: StageContext) -> StageResult:
    o = ctx.options(N0=5.0, threshold_a=-0.1, N1=1, min_measure=0.0)
    fld: SplittingField = ctx.need("field")
    factors = restricted_step_factors(ctx.system, fld, ctx.tol, threads=ctx.threads)
    ctx.state["factors"] = factors
    block = pesin_block(
        ctx.system, fld, o["N0"], o["threshold_a"], ctx.tol, orbit=ctx.state.get("orbit"), N1=o["N1"], factors=factors
    )
    ctx.state["block"] = block
    data = block.to_dict()
    ctx.json(data)
    passed = block.measure > o["min_measure"]
    return StageResult(passed=passed, summary=data, witness=None if passed else data)


@stage(StageName.RECURRENCES)
def _recurrences(ctx: StageContext) -> StageResult:
    o = ctx.options(delta=0.5, min_T=1.4, max_T=None, min_seeds=1, stride=1, per_itinerary=None)
    seeds = find_recurrences(
        ctx.system,
        ctx.need("orbit"),
        ctx.need("block"),
        o["delta"],
        o["min_T"],
        ctx.tol,
        max_T=o["max_T"],
        per_itinerary=o["per_itinerary"],
        stride=int(o["stride"]),
    )
    ctx.state["seeds"] = seeds
    ctx.json({"count": len(seeds), "seeds": [s.to_dict() for s in seeds]})
    ctx.csv(
        [{"start_time": s.start_time, "T": s.T, "gap": s.gap, "itinerary": s.itinerary} for s in seeds],
        "recurrences.csv",
        ["start_time", "T", "gap", "itinerary"],
    )
    passed = len(seeds) >= o["min_seeds"]
    classes = {primitive_word(s.itinerary)[0] for s in seeds if s.itinerary}
    summary = {"count": len(seeds), "itineraries": len(classes), "delta": o["delta"], "min_T": o["min_T"]}
    return StageResult(passed=passed, summary=summary, witness=None if passed else summary)


def _arcs(
    ctx: StageContext, fld: SplittingField, T0: float, arc_length: Optional[float], limit: int
) -> tuple[list[tuple[int, int, int, int]], int]:
    """(key, i0, i1, repeats) arcs in field indices, plus how many seeds ran past the field.

    A seed shorter than T0 is certified over the orbit arc of its smallest repeat
    count k with k·T ≥ T0.
    """
    n = len(ctx.need("factors"))
    seeds: Optional[list[RecurrenceSeed]] = ctx.state.get("seeds")
    arcs: list[tuple[int, int, int, int]] = []
    waived = 0
    if seeds is not None:
        for seed in seeds:
            repeats = max(1, math.ceil(T0 / seed.T - 1e-12))
            i0 = fld.index_of(seed.start_time)
            if i0 is None:
                waived += 1
                continue
            i1 = i0 + int(round(repeats * seed.T / fld.h_out))
            if i1 < n:
                arcs.append((seed.start_index, i0, i1, repeats))
            else:
                waived += 1
    else:
        block = ctx.need("block")
        steps = int(round((arc_length if arc_length is not None else 2.0 * T0) / fld.h_out))
        next_free = 0
        for i0 in block.block_indices:
            if i0 >= next_free and i0 + steps < n:
                arcs.append((int(i0), int(i0), int(i0 + steps), 1))
                next_free = i0 + steps
    return arcs[:limit], waived


@stage(StageName.CERTIFY)
def _certify(ctx: StageContext) -> StageResult:
    o = ctx.options(T0=5.0, lam=0.8, arc_length=None, max_arcs=50, min_fraction=0.9, reverify=True, tol_factor=0.5, max_drift=1e-4)
    fld: SplittingField = ctx.need("field")
    factors = ctx.need("factors")
    arcs, waived = _arcs(ctx, fld, o["T0"], o["arc_length"], int(o["max_arcs"]))
    certificates: dict[int, Any] = {}
    entries: list[dict[str, Any]] = []
    drift = 0.0
    for key, i0, i1, repeats in arcs:
        try:
            result = certify_quasi_hyperbolic(ctx.system, factors, i0, i1, o["T0"], o["lam"])
        except PartitionError as exc:
            entries.append(
                {"passed": False, "i0": i0, "i1": i1, "repeats": repeats, "condition": "partition", "message": str(exc)}
            )
            continue
        entry = {**result.to_dict(), "repeats": repeats}
        if result.passed:
            certificates[key] = result
            if o["reverify"]:
                check = reverify_certificate(ctx.system, result, fld, ctx.tol, tol_factor=o["tol_factor"])
                entry["reverify"] = check
                drift = max(drift, check["max_relative_drift"])
        entries.append(entry)
    ctx.state["certificates"] = certificates
    attempted = len(entries)
    fraction = len(certificates) / attempted if attempted else 0.0
    data = {
        "attempted": attempted,
        "certified": len(certificates),
        "waived": waived,
        "fraction": fraction,
        "max_relative_drift": drift,
        "T0": o["T0"],
        "lambda": o["lam"],
        "arcs": entries,
    }
    ctx.json(data)
    summary = {k: v for k, v in data.items() if k != "arcs"}
    checks = {
        "attempted": attempted > 0,
        "fraction": attempted > 0 and fraction >= o["min_fraction"],
        "drift": drift <= o["max_drift"],
    }
    summary["checks"] = checks
    passed = all(checks.values())
    failures = [e for e in entries if not e["passed"]]
    return StageResult(passed=passed, summary=summary, witness=None if passed else {**summary, "failures": failures[:10]})


def spread_seeds(seeds: list[RecurrenceSeed], limit: int) -> list[RecurrenceSeed]:
    """Up to ``limit`` seeds, round-robin over itinerary classes, shortest class first."""
    classes: dict[str, list[RecurrenceSeed]] = {}
    for seed in sorted(seeds, key=lambda s: (s.gap, s.start_time)):
        classes.setdefault(primitive_word(seed.itinerary)[0], []).append(seed)
    queues = sorted(classes.values(), key=lambda q: (min(s.T for s in q), q[0].itinerary))
    picked: list[RecurrenceSeed] = []
    depth = 0
    while len(picked) < limit and any(depth < len(q) for q in queues):
        picked += [q[depth] for q in queues if depth < len(q)][: limit - len(picked)]
        depth += 1
    return picked


@stage(StageName.SHADOW)
def _shadow(ctx: StageContext) -> StageResult:
    o = ctx.options(
        epsilon=0.1,
        max_seeds=20,
        shooting_step=0.25,
        newton_tol=1e-10,
        integ_tol=1e-12,
        beta=0.2,
        T0=None,
        residual_tol=1e-9,
        gap_scaling=True,
        gaps=[1e-3, 1e-4, 1e-5],
        gap_scaling_count=10,
        min_passing=1,
        expected_shortest=None,
        shortest_itinerary=None,
        shortest_tol=1e-3,
    )
    seeds = spread_seeds(ctx.need("seeds"), int(o["max_seeds"]))
    certificates: dict[int, Any] = ctx.state.get("certificates", {})
    shooting = dict(shooting_step=o["shooting_step"], integ_tol=o["integ_tol"], beta=o["beta"])

    def partition_for(seed: RecurrenceSeed) -> Optional[list[float]]:
        cert = certificates.get(seed.start_index)
        if cert is None:
            return None
        cuts = list(cert.partition[:-1])
        end = cuts[0] + seed.T
        return cuts + [end] if end > cuts[-1] else None

    def refine(seed: RecurrenceSeed) -> tuple[Optional[Any], Optional[dict[str, Any]]]:
        try:
            record = shadow_periodic(
                ctx.system, seed, o["newton_tol"], partition=partition_for(seed), T0=o["T0"], **shooting
            )
        except NewtonFailure as exc:
            return None, {"seed": seed.to_dict(), "error": str(exc), "residual_history": exc.residual_history}
        return record, None

    results = thread_map(refine, seeds, ctx.threads)
    records = [r for r, _ in results if r is not None]
    failures = [f for _, f in results if f is not None]
    if o["gap_scaling"]:
        for record in records[: int(o["gap_scaling_count"])]:
            try:
                gap_scaling(ctx.system, record, o["gaps"], tol=o["newton_tol"], **shooting)
            except NewtonFailure as exc:
                logger.warning("gap scaling failed for period %.6f: %s", record.period, exc)
    reports = [verify_shadowing(r, o["epsilon"], tol=o["residual_tol"]) for r in records]
    ctx.state["records"] = records
    ctx.json(
        {
            "records": [{**r.to_dict(), "verification": rep.to_dict()} for r, rep in zip(records, reports)],
            "failures": failures,
            "epsilon": o["epsilon"],
        }
    )
    rows = [
        {
            "period": r.period,
            "primitive_period": r.primitive_period,
            "itinerary": r.itinerary,
            "c_bound": r.c_bound,
            "d_bound": r.d_bound,
            "newton_residual": r.newton_residual,
            "unit_multiplier_dev": rep.items["e"]["value"],
            "passed": rep.passed,
        }
        for r, rep in zip(records, reports)
    ]
    ctx.csv(rows, "shadowing.csv", ["period", "primitive_period", "itinerary", "c_bound", "d_bound", "newton_residual", "unit_multiplier_dev", "passed"])
    passing = sum(rep.passed for rep in reports)
    summary: dict[str, Any] = {
        "seeds": len(seeds),
        "converged": len(records),
        "newton_failures": len(failures),
        "passing": passing,
    }
    checks = {"passing": passing >= o["min_passing"]}
    if o["expected_shortest"] is not None:
        periods = [
            r.primitive_period
            for r, rep in zip(records, reports)
            if rep.passed and (o["shortest_itinerary"] is None or r.itinerary == o["shortest_itinerary"])
        ]
        shortest = min(periods) if periods else None
        summary["shortest_period"] = shortest
        checks["shortest"] = shortest is not None and abs(shortest - o["expected_shortest"]) <= o["shortest_tol"]
    summary["checks"] = checks
    passed = all(checks.values())
    witness = None
    if not passed:
        witness = {**summary, "reports": [rep.to_dict() for rep in reports], "failures": failures}
    return StageResult(passed=passed, summary=summary, witness=witness)


@stage(StageName.CENSUS)
def _census(ctx: StageContext) -> StageResult:
    o = ctx.options(T_max=6.0, points=24, T_grid=None, min_rate=None, min_orbits=None, entropy_slack=0.1)
    census = horseshoe_census(ctx.need("records"), o["T_max"], T_grid=o["T_grid"], points=o["points"])
    ctx.state["census"] = census
    data = census.to_dict()
    checks = {"sufficient": not census.insufficient}
    if o["min_rate"] is not None:
        checks["rate"] = census.rate > o["min_rate"]
    if o["min_orbits"] is not None:
        checks["orbits"] = (census.counts[-1] if census.counts else 0) >= o["min_orbits"]
        if census.itineraries:
            checks["itineraries"] = census.itineraries >= o["min_orbits"]
    est = ctx.state.get("entropy")
    if est is not None:
        checks["entropy_ordering"] = census.rate <= est.h_upper + o["entropy_slack"]
    data["checks"] = checks
    ctx.json(data)
    ctx.csv(census.rows(), "census.csv", ["T", "N", "rate"])
    passed = all(checks.values())
    summary = {
        "rate": census.rate,
        "orbits": census.counts[-1] if census.counts else 0,
        "itineraries": census.itineraries,
        "checks": checks,
    }
    return StageResult(passed=passed, summary=summary, witness=None if passed else data)


# ----- Runner -----


def _error_witness(name: str, exc: BaseException) -> dict[str, Any]:
    return {**vars(exc), "stage": name, "error": type(exc).__name__, "message": str(exc)}


def run_pipeline(config: ExperimentConfig, *, bus: Optional[EventBus] = None) -> RunManifest:
    """Run every configured stage in order and write the manifest."""
    bus = bus if bus is not None else get_event_bus()
    digest = config_hash(config)
    run_id = digest[:12]
    paths = resolve_run_paths(Path(config.output))
    init_run_dir(paths)
    paths.config_toml.write_text(dump_config(config), encoding="utf-8")
    manifest = RunManifest.new(
        config_hash=digest, version=__version__, system=config.system.name, seed=config.seed, tol=config.tol
    )
    manifest.artifacts.extend([paths.config_toml.name, paths.events_jsonl.name])

    def log_event(event: Event) -> None:
        append_event(paths, event.to_dict())

    bus.on("*", log_event)
    try:
        _run_stages(config, manifest, paths, bus, run_id)
    finally:
        save_manifest(paths, manifest)
        bus.emit(EVENT_RUN_FINISHED, run_id, status=manifest.status, exit_code=manifest.exit_code)
        bus.off("*", log_event)
    return manifest


def _run_stages(config: ExperimentConfig, manifest: RunManifest, paths: RunPaths, bus: EventBus, run_id: str) -> None:
    bus.emit(EVENT_RUN_STARTED, run_id, system=config.system.name, stages=config.stage_names())
    try:
        system = build_system(config.system.name, **config.system.params)
    except ValueError as exc:
        manifest.status, manifest.exit_code = "input_error", EXIT_INPUT
        manifest.skipped = config.stage_names()
        logger.error("%s", exc)
        return
    state: dict[str, Any] = {}
    started = time.perf_counter()
    max_seconds = config.budgets.max_seconds
    for pos, spec in enumerate(config.stages):
        name = spec.name.value
        if max_seconds is not None and time.perf_counter() - started > max_seconds:
            logger.warning("time budget of %gs used up before stage %s", max_seconds, name)
            manifest.status, manifest.exit_code = "budget_exceeded", EXIT_BUDGET
            manifest.skipped = config.stage_names()[pos:]
            return
        ctx = StageContext(
            name=name,
            config=config,
            system=system,
            paths=paths,
            params=dict(spec.params),
            rng=stage_rng(config.seed, name),
            state=state,
            run_id=run_id,
            bus=bus,
        )
        record = StageRecord(name=name)
        manifest.stages.append(record)
        bus.emit(EVENT_STAGE_STARTED, run_id, stage=name)
        logger.info("stage %s started", name)
        t0 = time.perf_counter()
        outcome: Optional[tuple[str, int]] = None
        try:
            result = STAGES[spec.name](ctx)
        except BudgetExceeded as exc:
            record.error = str(exc)
            outcome = ("budget_exceeded", EXIT_BUDGET)
        except DOMAIN_ERRORS as exc:
            record.passed = False
            record.error = str(exc)
            record.witness = ctx.witness(_error_witness(name, exc))
            bus.emit(EVENT_GATE_FAILED, run_id, stage=name, witness=record.witness, error=type(exc).__name__)
            outcome = ("gate_failed", EXIT_GATE)
        except ValueError as exc:
            record.error = str(exc)
            outcome = ("input_error", EXIT_INPUT)
        else:
            record.passed = result.passed
            record.summary = result.summary
            if result.passed is False:
                record.witness = ctx.witness(result.witness if result.witness is not None else result.summary)
                bus.emit(EVENT_GATE_FAILED, run_id, stage=name, witness=record.witness)
                outcome = ("gate_failed", EXIT_GATE)
        record.wall_time = time.perf_counter() - t0
        record.artifacts = list(ctx.artifacts)
        manifest.artifacts.extend(ctx.artifacts)
        bus.emit(EVENT_STAGE_FINISHED, run_id, stage=name, passed=record.passed, wall_time=record.wall_time)
        logger.info("stage %s finished in %.2fs (passed=%s)", name, record.wall_time, record.passed)
        save_manifest(paths, manifest)
        if outcome is not None:
            manifest.status, manifest.exit_code = outcome
            manifest.failed_stage = name
            manifest.skipped = config.stage_names()[pos + 1 :]
            if record.error:
                logger.error("stage %s: %s", name, record.error)
            return
    manifest.status, manifest.exit_code = "passed", EXIT_OK
