"""Pesin blocks, quasi-hyperbolic arc certificates and periodic shadowing.

The scaled Poincaré cocycle is handled through per-sample step factors:
ψ*_h restricted to the normal projections πE and πF of a splitting field,
written in orthonormal coordinates at each sample. Every window product in
this module is a product of those factors.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence, Union

import numpy as np

from lorenzlab.flow_core import (
    DEFAULT_TOL,
    FlowSystem,
    OrbitSegment,
    evaluate,
    flow,
    flow_grid,
    tangent_flow,
    tangent_flow_ensemble,
)
from lorenzlab.parallel import thread_map
from lorenzlab.poincare import normal_frame, singularity_threshold
from lorenzlab.spatial import SpatialHash
from lorenzlab.splitting import CoverageError, SplittingField

logger = logging.getLogger(__name__)

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 50
NEWTON_HALVINGS = 8
SHOOTING_TOL = 1e-12
TUBE_BETA = 0.2
UNIT_MULTIPLIER_TOL = 1e-4
HYPERBOLIC_MARGIN = 1e-3
GAP_RATIO_LIMIT = 3.0
THETA_NOTE = "theta is the piecewise-linear interpolant of section crossing times"


class PartitionError(ValueError):
    pass


class NewtonFailure(RuntimeError):
    def __init__(self, message: str, *, residual_history: Sequence[float]) -> None:
        super().__init__(message)
        self.residual_history = [float(r) for r in residual_history]


# ----- Step factors -----


@dataclass
class StepFactors:
    """ψ*_h|πE and ψ*_h|πF between consecutive field samples."""

    times: np.ndarray
    RE: np.ndarray  # (m - 1, d_E, d_E)
    RF: np.ndarray  # (m - 1, d_F - 1, d_F - 1)
    speeds: np.ndarray  # (m,)
    h: float

    def __post_init__(self) -> None:
        self._cum_e = _cumulative_logs(self.RE)
        self._cum_f = _cumulative_logs(self.RF)

    def __len__(self) -> int:
        return int(self.times.shape[0])

    def log_norm_e(self, i: int, j: int) -> float:
        """log ‖Π_{i≤s<j} RE_s‖."""
        if self._cum_e is not None:
            return float(self._cum_e[j] - self._cum_e[i])
        return _window_log_sv(self.RE[i:j], largest=True)

    def log_conorm_f(self, i: int, j: int) -> float:
        """log m(Π_{i≤s<j} RF_s), m the smallest singular value."""
        if self._cum_f is not None:
            return float(self._cum_f[j] - self._cum_f[i])
        return _window_log_sv(self.RF[i:j], largest=False)


def _cumulative_logs(R: np.ndarray) -> Optional[np.ndarray]:
    if R.shape[1:] != (1, 1):
        return None
    with np.errstate(divide="ignore"):
        logs = np.log(np.abs(R[:, 0, 0]))
    return np.concatenate([[0.0], np.cumsum(logs)])


def _window_log_sv(mats: np.ndarray, *, largest: bool) -> float:
    if len(mats) == 0:
        return 0.0
    M = np.eye(mats.shape[1])
    log_scale = 0.0
    for R in mats:
        M = R @ M
        s = float(np.linalg.norm(M))
        if s == 0.0:
            return -math.inf
        M /= s
        log_scale += math.log(s)
    sv = np.linalg.svd(M, compute_uv=False)
    pick = sv[0] if largest else sv[-1]
    return log_scale + (math.log(pick) if pick > 0 else -math.inf)


def restricted_step_factors(
    system: FlowSystem, field: SplittingField, tol: float = DEFAULT_TOL, *, threads: int = 1
) -> StepFactors:
    """Per-step ψ* factors on πE and πF, re-anchored to the field at every sample."""
    if field.d_F < 2:
        raise ValueError("the scaled cocycle needs d_F >= 2 (F contains the flow direction)")
    m = len(field)
    if m < 2:
        raise ValueError("splitting field needs at least two samples")
    pieces = [p for p in np.array_split(np.arange(m - 1), max(1, threads)) if len(p)]

    def run(idx: np.ndarray) -> np.ndarray:
        return tangent_flow_ensemble(system, field.points[idx], field.h_out, tol)[1]

    Phi = np.concatenate(thread_map(run, pieces, threads), axis=0)
    speeds = np.linalg.norm(system.field(field.points), axis=-1)
    QE, QF, B = [], [], []
    for k in range(m):
        basis = normal_frame(system, field.points[k], threshold=0.0).basis
        qe, _ = np.linalg.qr(basis.T @ field.E[k])
        U, _, _ = np.linalg.svd(basis.T @ field.F[k])
        B.append(basis)
        QE.append(qe)
        QF.append(U[:, : field.d_F - 1])
    RE = np.empty((m - 1, field.d_E, field.d_E))
    RF = np.empty((m - 1, field.d_F - 1, field.d_F - 1))
    for k in range(m - 1):
        Psi = (speeds[k] / speeds[k + 1]) * (B[k + 1].T @ Phi[k] @ B[k])
        RE[k] = QE[k + 1].T @ Psi @ QE[k]
        RF[k] = QF[k + 1].T @ Psi @ QF[k]
    return StepFactors(times=field.times.copy(), RE=RE, RF=RF, speeds=speeds, h=field.h_out)


# ----- Pesin block -----


@dataclass
class PesinBlock:
    times: np.ndarray
    e_avgs: np.ndarray
    f_avgs: np.ndarray
    in_block: np.ndarray
    N0: float
    N1: int
    threshold_a: float

    @property
    def block_indices(self) -> np.ndarray:
        return np.flatnonzero(self.in_block)

    @property
    def block_times(self) -> np.ndarray:
        return self.times[self.in_block]

    @property
    def measure(self) -> float:
        return float(np.mean(self.in_block)) if len(self.in_block) else 0.0

    def to_dict(self) -> dict[str, Any]:
        finite_e = self.e_avgs[np.isfinite(self.e_avgs)]
        finite_f = self.f_avgs[np.isfinite(self.f_avgs)]
        return {
            "N0": self.N0,
            "N1": self.N1,
            "threshold_a": self.threshold_a,
            "measure": self.measure,
            "block_size": int(np.sum(self.in_block)),
            "samples": len(self.times),
            "e_avg_max": float(np.max(finite_e)) if len(finite_e) else None,
            "f_avg_max": float(np.max(finite_f)) if len(finite_f) else None,
        }


def pesin_block(
    system: FlowSystem,
    field: SplittingField,
    N0: float,
    threshold_a: float,
    tol: float = DEFAULT_TOL,
    *,
    orbit: Optional[OrbitSegment] = None,
    N1: int = 1,
    factors: Optional[StepFactors] = None,
) -> PesinBlock:
    """Times where both N1-window averages of the scaled cocycle stay below ``threshold_a``.

    E uses forward windows (1/N0) log‖ψ*_{N0}|πE‖; F uses backward windows
    −(1/N0) log m(ψ*_{N0}|πF) ending at the sample.
    """
    if N0 <= 0 or N1 < 1:
        raise ValueError(f"need N0 > 0 and N1 >= 1, got N0={N0}, N1={N1}")
    if orbit is not None:
        missing = [i for i, t in enumerate(field.times) if orbit.index_of(float(t)) is None]
        if missing:
            raise CoverageError(f"splitting samples {missing[:10]} are not orbit samples", missing=missing)
    f = factors if factors is not None else restricted_step_factors(system, field, tol)
    m = len(f)
    w = int(round(N0 / f.h))
    if w < 1:
        raise ValueError(f"N0={N0} is shorter than the sampling step {f.h}")
    span = w * N1
    e_avgs = np.full(m, np.nan)
    f_avgs = np.full(m, np.nan)
    for k in range(span, m - span):
        e_avgs[k] = np.mean([f.log_norm_e(k + r * w, k + (r + 1) * w) for r in range(N1)]) / N0
        f_avgs[k] = -np.mean([f.log_conorm_f(k - (r + 1) * w, k - r * w) for r in range(N1)]) / N0
    regular = f.speeds >= singularity_threshold(system)
    with np.errstate(invalid="ignore"):
        in_block = (e_avgs < threshold_a) & (f_avgs < threshold_a) & regular
    block = PesinBlock(
        times=f.times.copy(),
        e_avgs=e_avgs,
        f_avgs=f_avgs,
        in_block=np.asarray(in_block, dtype=bool),
        N0=float(N0),
        N1=N1,
        threshold_a=float(threshold_a),
    )
    logger.info("pesin block (N0=%g, a=%g): measure %.3f", N0, threshold_a, block.measure)
    return block


# ----- Quasi-hyperbolic certificates -----


@dataclass
class QuasiHyperbolicCertificate:
    i0: int
    i1: int
    t_start: float
    t_end: float
    T0: float
    lam: float
    partition: list[float]
    per_step: list[dict[str, float]]
    passed: bool = True

    def to_dict(self) -> dict[str, Any]:
        return {
            "passed": True,
            "i0": self.i0,
            "i1": self.i1,
            "t_start": self.t_start,
            "t_end": self.t_end,
            "T0": self.T0,
            "lambda": self.lam,
            "partition": self.partition,
            "per_step": self.per_step,
        }


@dataclass
class QuasiHyperbolicFailure:
    i0: int
    i1: int
    k: int
    condition: str  # "step_ratio", "e_product" or "f_coproduct"
    value: float
    bound: float
    partition: list[float]
    passed: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "passed": False,
            "i0": self.i0,
            "i1": self.i1,
            "k": self.k,
            "condition": self.condition,
            "value": self.value,
            "bound": self.bound,
            "partition": self.partition,
        }


def _partition(f: StepFactors, i0: int, total: int, s0: int, log_lam: float) -> list[int]:
    """Greedy cut lengths in [s0, 2·s0] covering ``total`` steps."""
    cuts: list[int] = []
    pos, e_sum = 0, 0.0
    while pos < total:
        remaining = total - pos
        choices = [s for s in range(s0, min(2 * s0, remaining) + 1) if remaining - s == 0 or remaining - s >= s0]
        if not choices:
            raise PartitionError(f"{remaining} remaining steps cannot be covered by steps in [{s0}, {2 * s0}]")
        k = len(cuts) + 1
        chosen = choices[0]
        for s in choices:
            e = f.log_norm_e(i0 + pos, i0 + pos + s)
            g = f.log_conorm_f(i0 + pos, i0 + pos + s)
            if e_sum + e <= k * log_lam and e - g <= 2.0 * log_lam:
                chosen = s
                break
        e_sum += f.log_norm_e(i0 + pos, i0 + pos + chosen)
        cuts.append(chosen)
        pos += chosen
    return cuts


def certify_quasi_hyperbolic(
    system: FlowSystem,
    factors: StepFactors,
    i0: int,
    i1: int,
    T0: float,
    lam: float,
) -> Union[QuasiHyperbolicCertificate, QuasiHyperbolicFailure]:
    """Check the three product conditions of a (λ, T0)* quasi-hyperbolic arc.

    ``i0``/``i1`` index the field samples bounding the arc.
    """
    if not 0 < lam < 1:
        raise ValueError(f"lambda must lie in (0, 1), got {lam}")
    if not 0 <= i0 < i1 < len(factors):
        raise ValueError(f"arc indices ({i0}, {i1}) fall outside the {len(factors)} field samples")
    f = factors
    s0 = int(round(T0 / f.h))
    if s0 < 1:
        raise ValueError(f"T0={T0} is shorter than the sampling step {f.h}")
    total = i1 - i0
    if total < s0:
        raise PartitionError(f"arc of length {total * f.h:g} is shorter than T0={T0:g}")
    log_lam = math.log(lam)
    cuts = _partition(f, i0, total, s0, log_lam)
    bounds = np.concatenate([[0], np.cumsum(cuts)]) + i0
    partition = [float(f.times[b]) for b in bounds]
    e_logs = [f.log_norm_e(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
    g_logs = [f.log_conorm_f(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
    l = len(cuts)
    e_prefix = np.concatenate([[0.0], np.cumsum(e_logs)])
    g_suffix = np.concatenate([np.cumsum(g_logs[::-1])[::-1], [0.0]])
    per_step = []
    for k in range(1, l + 1):
        ratio = e_logs[k - 1] - g_logs[k - 1]
        if ratio > 2.0 * log_lam:
            return QuasiHyperbolicFailure(i0, i1, k, "step_ratio", math.exp(ratio), lam**2, partition)
        if e_prefix[k] > k * log_lam:
            return QuasiHyperbolicFailure(i0, i1, k, "e_product", math.exp(e_prefix[k]), lam**k, partition)
        if g_suffix[k - 1] < (k - 1 - l) * log_lam:
            return QuasiHyperbolicFailure(
                i0, i1, k, "f_coproduct", math.exp(g_suffix[k - 1]), lam ** (k - 1 - l), partition
            )
        per_step.append(
            {
                "t_start": partition[k - 1],
                "t_end": partition[k],
                "e_norm": math.exp(e_logs[k - 1]),
                "f_conorm": math.exp(g_logs[k - 1]),
                "step_ratio": math.exp(ratio),
                "e_product": math.exp(e_prefix[k]),
                "f_coproduct": math.exp(g_suffix[k - 1]),
            }
        )
    return QuasiHyperbolicCertificate(
        i0=i0,
        i1=i1,
        t_start=partition[0],
        t_end=partition[-1],
        T0=T0,
        lam=lam,
        partition=partition,
        per_step=per_step,
    )


def reverify_certificate(
    system: FlowSystem,
    cert: QuasiHyperbolicCertificate,
    field: SplittingField,
    tol: float,
    *,
    tol_factor: float = 0.01,
) -> dict[str, Any]:
    """Recompute every step factor of a certified arc at ``tol · tol_factor``."""
    window = field.window(cert.i0, cert.i1 + 1)
    f = restricted_step_factors(system, window, tol * tol_factor)
    log_lam = math.log(cert.lam)
    idx = [window.index_of(t) for t in cert.partition]
    if any(i is None for i in idx):
        raise CoverageError("partition times are not field samples", missing=[i for i in idx if i is None])
    drift = 0.0
    holds = True
    e_sum = 0.0
    g_logs = []
    for k, (a, b) in enumerate(zip(idx[:-1], idx[1:]), start=1):
        e, g = f.log_norm_e(a, b), f.log_conorm_f(a, b)  # type: ignore[arg-type]
        old = cert.per_step[k - 1]
        drift = max(drift, abs(math.exp(e) - old["e_norm"]) / old["e_norm"])
        drift = max(drift, abs(math.exp(g) - old["f_conorm"]) / old["f_conorm"])
        e_sum += e
        g_logs.append(g)
        holds &= e - g <= 2.0 * log_lam and e_sum <= k * log_lam
    l = len(g_logs)
    suffix = np.concatenate([np.cumsum(g_logs[::-1])[::-1], [0.0]])
    holds &= all(suffix[k] >= (k - l) * log_lam for k in range(l))
    return {"max_relative_drift": drift, "holds": bool(holds), "tol": tol * tol_factor}


# ----- Itineraries -----


def primitive_word(word: str) -> tuple[str, int]:
    """Canonical (lexicographically least) rotation of the primitive root, and the repeat count."""
    if not word:
        return "", 1
    n = len(word)
    root = word
    for d in range(1, n + 1):
        if n % d == 0 and word[:d] * (n // d) == word:
            root = word[:d]
            break
    canon = min(root[i:] + root[:i] for i in range(len(root)))
    return canon, n // len(root)


def _lobe_symbols(points: np.ndarray, cyclic: bool) -> str:
    z, x = points[:, 2], points[:, 0]
    if cyclic:
        prev, nxt = np.roll(z, 1), np.roll(z, -1)
        peaks = np.flatnonzero((z > prev) & (z >= nxt))
    else:
        peaks = np.flatnonzero((z[1:-1] > z[:-2]) & (z[1:-1] >= z[2:])) + 1
    return "".join("L" if x[i] < 0 else "R" for i in peaks)


def lorenz_itinerary(
    system: FlowSystem, p: Any, period: float, tol: float = DEFAULT_TOL, *, samples_per_unit: int = 400
) -> str:
    """Lobe word of a periodic orbit: sign of x at successive maxima of z (Lorenz only)."""
    if system.name != "lorenz":
        return ""
    n = max(64, int(samples_per_unit * period))
    times = np.linspace(0.0, period, n + 1)[:-1]
    return _lobe_symbols(flow_grid(system, p, times, tol), cyclic=True)


# ----- Recurrences -----


@dataclass
class RecurrenceSeed:
    x: list[float]
    T: float
    gap: float
    start_time: float
    start_index: int
    itinerary: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "x": self.x,
            "T": self.T,
            "gap": self.gap,
            "start_time": self.start_time,
            "start_index": self.start_index,
            "itinerary": self.itinerary,
        }

    @staticmethod
    def from_dict(data: dict[str, Any]) -> "RecurrenceSeed":
        return RecurrenceSeed(
            x=[float(v) for v in data["x"]],
            T=float(data["T"]),
            gap=float(data["gap"]),
            start_time=float(data["start_time"]),
            start_index=int(data["start_index"]),
            itinerary=str(data.get("itinerary", "")),
        )


def _refine_return(
    system: FlowSystem, x: np.ndarray, y: np.ndarray, tol: float, max_iter: int = 8
) -> tuple[np.ndarray, float]:
    """Slide y along its orbit onto the hyperplane through x normal to X(x)."""
    n = evaluate(system, x)
    total = 0.0
    for _ in range(max_iter):
        offset = float((y - x) @ n)
        denom = float(evaluate(system, y) @ n)
        if denom == 0.0 or abs(offset) <= 1e-14 * max(1.0, float(np.linalg.norm(n))):
            break
        dt = -offset / denom
        y = flow(system, y, dt, tol)
        total += dt
    return y, total


def find_recurrences(
    system: FlowSystem,
    orbit: OrbitSegment,
    block: PesinBlock,
    delta: float,
    min_T: float,
    tol: float = DEFAULT_TOL,
    *,
    max_T: Optional[float] = None,
    per_itinerary: Optional[int] = None,
    stride: int = 1,
) -> list[RecurrenceSeed]:
    """Pseudo-periodic seeds: pairs of block times (s, s + T), T ≥ min_T, with gap < delta.

    Seeds are kept in order of increasing gap, at least min_T / 2 apart in start time
    within one itinerary class, and at most ``per_itinerary`` per class when given.
    Non-Lorenz systems have a single class. ``stride`` thins the start points only.
    """
    if delta <= 0 or len(block.block_indices) == 0:
        return []
    if min_T <= 0:
        raise ValueError(f"min_T must be positive, got {min_T}")
    if per_itinerary is not None and per_itinerary < 1:
        raise ValueError(f"per_itinerary must be at least 1, got {per_itinerary}")
    if stride < 1:
        raise ValueError(f"stride must be at least 1, got {stride}")
    idx = [orbit.index_of(float(t)) for t in block.block_times]
    if any(i is None for i in idx):
        raise CoverageError("block times are not orbit samples", missing=[k for k, i in enumerate(idx) if i is None])
    block_idx = np.asarray(idx, dtype=int)
    pts = orbit.points[block_idx]
    times = orbit.times[block_idx]
    h = orbit.h_out
    reach = delta + float(np.max(np.linalg.norm(system.field(pts), axis=-1))) * h
    index = SpatialHash(reach, system.dim)
    index.extend(range(len(pts)), pts)
    found: list[RecurrenceSeed] = []
    last = len(orbit.points) - 1

    def sample_dist(j: int, x: np.ndarray) -> float:
        return float(np.linalg.norm(orbit.points[j] - x)) if 0 <= j <= last else math.inf

    for a in range(0, len(pts), stride):
        cand = sorted(
            c
            for c in index.candidates(pts[a], reach)
            if times[c] - times[a] >= min_T - h and (max_T is None or times[c] - times[a] <= max_T + h)
        )
        if not cand:
            continue
        dist = np.linalg.norm(pts[cand] - pts[a], axis=1)
        # local minima over consecutive orbit samples mark individual returns
        for r, c in enumerate(cand):
            if dist[r] > reach:
                continue
            j = int(block_idx[c])
            if sample_dist(j - 1, pts[a]) < dist[r] or sample_dist(j + 1, pts[a]) <= dist[r]:
                continue
            y, dt = _refine_return(system, pts[a], pts[c], tol)
            gap = float(np.linalg.norm(y - pts[a]))
            T = float(times[c] - times[a] + dt)
            if gap < delta and T >= min_T and (max_T is None or T <= max_T):
                found.append(
                    RecurrenceSeed(
                        x=pts[a].tolist(),
                        T=T,
                        gap=gap,
                        start_time=float(times[a]),
                        start_index=int(block_idx[a]),
                    )
                )
    if system.name == "lorenz":
        for seed in found:
            stop = seed.start_index + int(round(seed.T / h)) + 1
            seed.itinerary = _lobe_symbols(orbit.points[seed.start_index : stop], cyclic=False)
    found.sort(key=lambda s: (s.gap, s.start_time))
    classes: dict[tuple[str, int], list[RecurrenceSeed]] = {}
    kept: list[RecurrenceSeed] = []
    for seed in found:
        same = classes.setdefault(primitive_word(seed.itinerary), [])
        if per_itinerary is not None and len(same) >= per_itinerary:
            continue
        if all(abs(seed.start_time - k.start_time) >= min_T / 2.0 for k in same):
            same.append(seed)
            kept.append(seed)
    kept.sort(key=lambda s: s.start_time)
    logger.info("found %d recurrence seeds in %d classes (delta=%g, min_T=%g)", len(kept), len(classes), delta, min_T)
    return kept


# ----- Periodic shadowing -----


@dataclass
class PeriodicOrbitRecord:
    point: list[float]
    period: float
    primitive_period: float
    multiplicity: int
    itinerary: str
    seed_x: list[float]
    seed_T: float
    seed_gap: float
    theta_fit: list[list[float]]
    c_bound: float
    d_bound: float
    floquet: list[list[float]]
    newton_residual: float
    newton_iterations: int
    residual_history: list[float]
    segments: int
    left_tube: bool = False
    itinerary_mismatch: bool = False
    certification_waived: bool = False
    gap_ratios: list[list[float]] = field(default_factory=list)
    note: str = THETA_NOTE

    def theta_slopes(self) -> np.ndarray:
        fit = np.asarray(self.theta_fit, dtype=float)
        return np.diff(fit[:, 1]) / np.diff(fit[:, 0])

    def multipliers(self) -> np.ndarray:
        arr = np.asarray(self.floquet, dtype=float).reshape(-1, 2)
        return arr[:, 0] + 1j * arr[:, 1]

    def to_dict(self) -> dict[str, Any]:
        return {
            "point": self.point,
            "period": self.period,
            "primitive_period": self.primitive_period,
            "multiplicity": self.multiplicity,
            "itinerary": self.itinerary,
            "seed_x": self.seed_x,
            "seed_T": self.seed_T,
            "seed_gap": self.seed_gap,
            "theta_fit": self.theta_fit,
            "c_bound": self.c_bound,
            "d_bound": self.d_bound,
            "floquet": self.floquet,
            "newton_residual": self.newton_residual,
            "newton_iterations": self.newton_iterations,
            "residual_history": self.residual_history,
            "segments": self.segments,
            "left_tube": self.left_tube,
            "itinerary_mismatch": self.itinerary_mismatch,
            "certification_waived": self.certification_waived,
            "gap_ratios": self.gap_ratios,
            "note": self.note,
        }

    @staticmethod
    def from_dict(data: dict[str, Any]) -> "PeriodicOrbitRecord":
        return PeriodicOrbitRecord(
            point=[float(v) for v in data["point"]],
            period=float(data["period"]),
            primitive_period=float(data.get("primitive_period", data["period"])),
            multiplicity=int(data.get("multiplicity", 1)),
            itinerary=str(data.get("itinerary", "")),
            seed_x=[float(v) for v in data["seed_x"]],
            seed_T=float(data["seed_T"]),
            seed_gap=float(data["seed_gap"]),
            theta_fit=[[float(a), float(b)] for a, b in data["theta_fit"]],
            c_bound=float(data["c_bound"]),
            d_bound=float(data["d_bound"]),
            floquet=[[float(a), float(b)] for a, b in data["floquet"]],
            newton_residual=float(data["newton_residual"]),
            newton_iterations=int(data["newton_iterations"]),
            residual_history=[float(r) for r in data.get("residual_history", [])],
            segments=int(data.get("segments", 1)),
            left_tube=bool(data.get("left_tube", False)),
            itinerary_mismatch=bool(data.get("itinerary_mismatch", False)),
            certification_waived=bool(data.get("certification_waived", False)),
            gap_ratios=[[float(a), float(b)] for a, b in data.get("gap_ratios", [])],
            note=str(data.get("note", THETA_NOTE)),
        )


def _shooting_residual(
    system: FlowSystem,
    Y: np.ndarray,
    tau: np.ndarray,
    anchors: np.ndarray,
    normals: np.ndarray,
    tol: float,
    *,
    with_jacobian: bool,
) -> tuple[np.ndarray, Optional[np.ndarray], list[np.ndarray]]:
    m, dim = Y.shape
    size = m * (dim + 1)
    res = np.empty(size)
    J = np.zeros((size, size)) if with_jacobian else None
    mats = []
    for i in range(m):
        j = (i + 1) % m
        if with_jacobian:
            end, Phi = tangent_flow(system, Y[i], np.eye(dim), float(tau[i]), tol)
            mats.append(Phi)
        else:
            end = flow(system, Y[i], float(tau[i]), tol)
        rows = slice(i * dim, (i + 1) * dim)
        res[rows] = end - Y[j]
        res[m * dim + i] = float((Y[i] - anchors[i]) @ normals[i])
        if J is not None:
            J[rows, i * dim : (i + 1) * dim] += Phi
            J[rows, j * dim : (j + 1) * dim] -= np.eye(dim)
            J[rows, m * dim + i] = evaluate(system, end)
            J[m * dim + i, i * dim : (i + 1) * dim] = normals[i]
    return res, J, mats


def _newton(
    system: FlowSystem,
    Y: np.ndarray,
    tau: np.ndarray,
    anchors: np.ndarray,
    normals: np.ndarray,
    tol: float,
    integ_tol: float,
    max_iter: int,
) -> tuple[np.ndarray, np.ndarray, list[float], list[np.ndarray]]:
    m, dim = Y.shape
    history: list[float] = []
    for _ in range(max_iter + 1):
        res, J, mats = _shooting_residual(system, Y, tau, anchors, normals, integ_tol, with_jacobian=True)
        r0 = float(np.max(np.abs(res)))
        history.append(r0)
        if r0 < tol:
            return Y, tau, history, mats
        if len(history) > max_iter:
            break
        try:
            step = np.linalg.solve(J, -res)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(J, -res, rcond=None)[0]
        alpha = 1.0
        for _ in range(NEWTON_HALVINGS + 1):
            Y_try = Y + alpha * step[: m * dim].reshape(m, dim)
            tau_try = tau + alpha * step[m * dim :]
            if np.all(tau_try > 0):
                try:
                    trial, _, _ = _shooting_residual(
                        system, Y_try, tau_try, anchors, normals, integ_tol, with_jacobian=False
                    )
                    if float(np.max(np.abs(trial))) < r0:
                        break
                except (RuntimeError, ValueError):
                    pass
            alpha *= 0.5
        Y, tau = Y_try, tau_try
        if not np.all(tau > 0):
            break
    raise NewtonFailure(
        f"multiple shooting did not converge in {max_iter} iterations (last residual {history[-1]:.3g})",
        residual_history=history,
    )


def _partition_times(T: float, shooting_step: float, partition: Optional[Sequence[float]]) -> np.ndarray:
    if partition is not None:
        cuts = np.asarray(partition, dtype=float)
        cuts = cuts - cuts[0]
        if abs(cuts[-1] - T) > 1e-9 * max(1.0, T) or np.any(np.diff(cuts) <= 0):
            raise ValueError("partition must increase from 0 to the seed period")
        fine = [0.0]
        for a, b in zip(cuts[:-1], cuts[1:]):
            n = max(1, int(math.ceil((b - a) / shooting_step)))
            fine.extend(np.linspace(a, b, n + 1)[1:])
        return np.asarray(fine)
    n = max(1, int(math.ceil(T / shooting_step)))
    return np.linspace(0.0, T, n + 1)


def shadow_periodic(
    system: FlowSystem,
    seed: RecurrenceSeed,
    tol: float = NEWTON_TOL,
    *,
    partition: Optional[Sequence[float]] = None,
    shooting_step: float = 0.25,
    integ_tol: float = SHOOTING_TOL,
    max_iter: int = NEWTON_MAX_ITER,
    beta: float = TUBE_BETA,
    T0: Optional[float] = None,
    samples_per_segment: int = 8,
) -> PeriodicOrbitRecord:
    """Refine a pseudo-periodic seed into a periodic orbit by multiple shooting.

    Unknowns are one point per section and one flight time per segment; each
    section is the hyperplane through a seed point normal to X there.
    """
    x = np.asarray(seed.x, dtype=float)
    T = float(seed.T)
    if T <= 0:
        raise ValueError(f"seed period must be positive, got {T}")
    cut = _partition_times(T, shooting_step, partition)
    anchors = flow_grid(system, x, cut, integ_tol)
    m = len(cut) - 1
    A = anchors[:m]
    normals = system.field(A)
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    Y, tau, history, mats = _newton(system, A.copy(), np.diff(cut), A, normals, tol, integ_tol, max_iter)
    period = float(np.sum(tau))
    p = Y[0].copy()
    monodromy = np.eye(system.dim)
    for Phi in mats:
        monodromy = Phi @ monodromy
    mult = np.linalg.eigvals(monodromy)
    mult = mult[np.argsort(-np.abs(mult), kind="stable")]
    theta = np.concatenate([[0.0], np.cumsum(tau)])
    speeds = np.linalg.norm(system.field(A), axis=1)
    left_tube = bool(np.any(np.linalg.norm(Y - A, axis=1) > beta * speeds))

    c_bound = 0.0
    for i in range(m):
        span = cut[i + 1] - cut[i]
        u = np.linspace(0.0, span, samples_per_segment + 1)
        seed_pts = flow_grid(system, A[i], u, integ_tol)
        shadow_pts = flow_grid(system, Y[i], u * (tau[i] / span), integ_tol)
        dist = np.linalg.norm(seed_pts - shadow_pts, axis=1)
        c_bound = max(c_bound, float(np.max(dist / np.linalg.norm(system.field(seed_pts), axis=1))))

    gap = float(seed.gap)
    grid = np.linspace(0.0, T, m * samples_per_segment + 1)
    displacement = float(np.max(np.linalg.norm(flow_grid(system, x, grid, integ_tol) - flow_grid(system, p, grid, integ_tol), axis=1)))
    d_bound = displacement / gap if gap > 0 else (0.0 if displacement == 0 else math.inf)

    itinerary, mult_k = "", 1
    mismatch = False
    if system.name == "lorenz":
        word = lorenz_itinerary(system, p, period, integ_tol)
        itinerary, mult_k = primitive_word(word)
        if seed.itinerary:
            mismatch = primitive_word(seed.itinerary)[0] != itinerary
    waived = T0 is not None and T < T0
    record = PeriodicOrbitRecord(
        point=p.tolist(),
        period=period,
        primitive_period=period / mult_k,
        multiplicity=mult_k,
        itinerary=itinerary,
        seed_x=x.tolist(),
        seed_T=T,
        seed_gap=gap,
        theta_fit=[[float(a), float(b)] for a, b in zip(cut, theta)],
        c_bound=c_bound,
        d_bound=d_bound,
        floquet=[[float(z.real), float(z.imag)] for z in mult],
        newton_residual=history[-1],
        newton_iterations=len(history) - 1,
        residual_history=history,
        segments=m,
        left_tube=left_tube,
        itinerary_mismatch=mismatch,
        certification_waived=waived,
    )
    logger.info(
        "shadowed seed T=%.4f gap=%.2e -> period %.6f %s (%d Newton steps)",
        T, gap, period, itinerary or "", record.newton_iterations,
    )
    return record


def gap_scaling(
    system: FlowSystem,
    record: PeriodicOrbitRecord,
    gaps: Sequence[float] = (1e-3, 1e-4, 1e-5),
    *,
    direction: Optional[Sequence[float]] = None,
    **kwargs: Any,
) -> list[list[float]]:
    """Displace a converged orbit point by each gap, reshadow, and record d_bound per gap."""
    p = np.asarray(record.point, dtype=float)
    if direction is None:
        basis = normal_frame(system, p).basis
        u = basis @ np.ones(basis.shape[1])
    else:
        u = np.asarray(direction, dtype=float)
    u = u / np.linalg.norm(u)
    ratios = []
    for d in gaps:
        start = p + d * u
        end = flow(system, start, record.period, SHOOTING_TOL)
        seed = RecurrenceSeed(
            x=start.tolist(),
            T=record.period,
            gap=float(np.linalg.norm(end - start)),
            start_time=0.0,
            start_index=0,
        )
        shadow = shadow_periodic(system, seed, **kwargs)
        ratios.append([float(d), shadow.d_bound])
    record.gap_ratios = ratios
    return ratios


# ----- Verification and census -----


@dataclass
class ShadowingReport:
    items: dict[str, dict[str, Any]]

    @property
    def passed(self) -> bool:
        return all(item["passed"] for item in self.items.values())

    def to_dict(self) -> dict[str, Any]:
        return {"passed": self.passed, "items": self.items}


def verify_shadowing(
    record: PeriodicOrbitRecord,
    epsilon: float,
    *,
    tol: float = 1e-9,
    unit_tol: float = UNIT_MULTIPLIER_TOL,
    margin: float = HYPERBOLIC_MARGIN,
) -> ShadowingReport:
    """Pass/fail on the five shadowing items for one converged record."""
    slopes = record.theta_slopes()
    dev = float(np.max(np.abs(slopes - 1.0))) if len(slopes) else 0.0
    exact = dev == 0.0 and record.c_bound == 0.0
    a_ok = bool(np.all(slopes > 0)) and (dev < epsilon or exact)
    theta_end = record.theta_fit[-1][1] if record.theta_fit else 0.0
    c_item = abs(theta_end - record.period) <= 1e-9 * max(1.0, record.period) and record.period > 0
    ratios = [r[1] for r in record.gap_ratios]
    spread = max(ratios) / min(ratios) if ratios and min(ratios) > 0 else 1.0
    d_ok = math.isfinite(record.d_bound) and (not ratios or spread <= GAP_RATIO_LIMIT)
    mult = record.multipliers()
    if len(mult):
        unit = int(np.argmin(np.abs(mult - 1.0)))
        rest = np.delete(mult, unit)
        e_ok = bool(abs(mult[unit] - 1.0) < unit_tol and np.all(np.abs(np.abs(rest) - 1.0) > margin))
        unit_dev = float(abs(mult[unit] - 1.0))
    else:
        e_ok, unit_dev = False, math.inf
    items = {
        "a": {"passed": a_ok, "value": dev, "bound": epsilon, "detail": "max |theta' - 1|"},
        "b": {"passed": record.newton_residual < tol, "value": record.newton_residual, "bound": tol, "detail": "periodicity residual"},
        "c": {
            "passed": bool(c_item and (record.c_bound <= epsilon or exact)),
            "value": record.c_bound,
            "bound": epsilon,
            "detail": "max distance to the shadow over |X|",
        },
        "d": {"passed": bool(d_ok), "value": record.d_bound, "bound": GAP_RATIO_LIMIT, "detail": "d_bound finite; gap ratios spread"},
        "e": {"passed": e_ok, "value": unit_dev, "bound": unit_tol, "detail": "Floquet: one unit multiplier, rest hyperbolic"},
    }
    return ShadowingReport(items=items)


def dedupe_records(records: Sequence[PeriodicOrbitRecord], period_tol: float = 1e-6) -> list[PeriodicOrbitRecord]:
    """One record per distinct orbit (itinerary, primitive period)."""
    kept: list[PeriodicOrbitRecord] = []
    for rec in sorted(records, key=lambda r: (r.primitive_period, r.itinerary)):
        duplicate = any(
            k.itinerary == rec.itinerary and abs(k.primitive_period - rec.primitive_period) <= period_tol for k in kept
        )
        if not duplicate:
            kept.append(rec)
    return kept


@dataclass
class Census:
    T_grid: list[float]
    counts: list[int]
    rate: float
    endpoint_rate: float
    insufficient: bool
    itineraries: int = 0

    def rows(self) -> list[dict[str, Any]]:
        return [{"T": t, "N": n, "rate": self.rate} for t, n in zip(self.T_grid, self.counts)]

    def to_dict(self) -> dict[str, Any]:
        return {
            "T_grid": self.T_grid,
            "counts": self.counts,
            "rate": self.rate,
            "endpoint_rate": self.endpoint_rate,
            "insufficient": self.insufficient,
            "itineraries": self.itineraries,
        }


def horseshoe_census(
    records: Sequence[PeriodicOrbitRecord],
    T_max: float,
    *,
    T_grid: Optional[Sequence[float]] = None,
    points: int = 24,
) -> Census:
    """N(T) = distinct periodic orbits with period ≤ T and its exponential growth rate.

    ``itineraries`` counts the distinct non-empty lobe words up to T_max.
    """
    if T_max <= 0:
        raise ValueError(f"T_max must be positive, got {T_max}")
    unique = dedupe_records(records)
    periods = np.array([r.primitive_period for r in unique])
    grid = np.asarray(T_grid if T_grid is not None else np.linspace(T_max / points, T_max, points), dtype=float)
    counts = [int(np.sum(periods <= t + 1e-12)) for t in grid]
    positive = np.array(counts) > 0
    insufficient = int(np.sum(positive)) < 3
    if insufficient:
        rate = 0.0
    else:
        rate = float(np.polyfit(grid[positive], np.log(np.array(counts)[positive]), 1)[0])
    endpoint = math.log(counts[-1]) / float(grid[-1]) if counts and counts[-1] > 0 else 0.0
    if insufficient:
        logger.warning("census has fewer than three populated grid points")
    return Census(
        T_grid=[float(t) for t in grid],
        counts=counts,
        rate=rate,
        endpoint_rate=endpoint,
        insufficient=insufficient,
        itineraries=len({r.itinerary for r in unique if r.itinerary and r.primitive_period <= T_max + 1e-12}),
    )
