"""Lyapunov spectra, Oseledets splittings and dominated-splitting certificates.

Everything here is empirical: a certificate reports the worst case over a
finite sample of points and directions, together with the witness that
attains it.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import norm as normal_dist
from scipy.stats import qmc

from lorenzlab.flow_core import (
    DEFAULT_TOL,
    FlowSystem,
    OrbitSegment,
    TangentCocycleState,
    advance,
    evaluate,
    flow,
    flow_ensemble,
    renormalize,
    sign_fixed_qr,
    tangent_flow_ensemble,
    tangent_flow_grid,
)
from lorenzlab.parallel import thread_map
from lorenzlab.poincare import normal_frame, singularity_threshold

logger = logging.getLogger(__name__)

DOMINATION_RATIO = 0.5
ANGLE_GATE = 0.01
DRIFT_GATE = 1e-3
MIN_RENORM_STEPS = 100
DEGENERATE_GAP = 1e-8


class NoDominationError(RuntimeError):
    def __init__(self, message: str, *, max_angle: float, lookback: float) -> None:
        super().__init__(message)
        self.max_angle = float(max_angle)
        self.lookback = float(lookback)


class CoverageError(KeyError):
    def __init__(self, message: str, *, missing: Sequence[int]) -> None:
        super().__init__(message)
        self.message = message
        self.missing = list(missing)

    def __str__(self) -> str:
        return self.message


# ----- Result types -----


@dataclass
class LyapunovSpectrum:
    exponents: np.ndarray
    T: float
    renorm_step: float
    drift: np.ndarray
    converged: bool
    singular_hits: int
    zero_index: Optional[int]
    divergence_mean: float
    history: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def max_drift(self) -> float:
        return float(np.max(self.drift)) if self.drift.size else 0.0

    @property
    def sum_residual(self) -> float:
        """|Σλ_i − mean divergence|, a cheap global accuracy check."""
        return float(abs(np.sum(self.exponents) - self.divergence_mean))

    def to_dict(self) -> dict[str, Any]:
        return {
            "exponents": self.exponents.tolist(),
            "T": self.T,
            "renorm_step": self.renorm_step,
            "drift": self.drift.tolist(),
            "max_drift": self.max_drift,
            "converged": self.converged,
            "singular_hits": self.singular_hits,
            "zero_index": self.zero_index,
            "divergence_mean": self.divergence_mean,
            "sum_residual": self.sum_residual,
        }

    @staticmethod
    def from_dict(data: dict[str, Any]) -> "LyapunovSpectrum":
        return LyapunovSpectrum(
            exponents=np.asarray(data["exponents"], dtype=float),
            T=float(data["T"]),
            renorm_step=float(data["renorm_step"]),
            drift=np.atleast_1d(np.asarray(data["drift"], dtype=float)),
            converged=bool(data["converged"]),
            singular_hits=int(data["singular_hits"]),
            zero_index=data.get("zero_index"),
            divergence_mean=float(data.get("divergence_mean", 0.0)),
        )


@dataclass
class SplittingField:
    """Orthonormal bases of E and F at consecutive samples of one orbit."""

    times: np.ndarray
    points: np.ndarray
    E: np.ndarray  # (m, dim, d_E)
    F: np.ndarray  # (m, dim, d_F)
    h_out: float
    lookback: float = 0.0
    max_angle_change: float = 0.0

    def __len__(self) -> int:
        return int(self.times.shape[0])

    @property
    def dim(self) -> int:
        return int(self.points.shape[1])

    @property
    def d_E(self) -> int:
        return int(self.E.shape[2])

    @property
    def d_F(self) -> int:
        return int(self.F.shape[2])

    def index_of(self, t: float) -> Optional[int]:
        if len(self) == 0:
            return None
        k = int(round((t - float(self.times[0])) / self.h_out))
        if 0 <= k < len(self) and abs(float(self.times[k]) - t) <= 1e-6 * self.h_out:
            return k
        return None

    def window(self, start: int, stop: int) -> "SplittingField":
        return SplittingField(
            times=self.times[start:stop].copy(),
            points=self.points[start:stop].copy(),
            E=self.E[start:stop].copy(),
            F=self.F[start:stop].copy(),
            h_out=self.h_out,
            lookback=self.lookback,
            max_angle_change=self.max_angle_change,
        )

    def swapped(self) -> "SplittingField":
        return SplittingField(
            times=self.times,
            points=self.points,
            E=self.F,
            F=self.E,
            h_out=self.h_out,
            lookback=self.lookback,
            max_angle_change=self.max_angle_change,
        )

    def summary(self) -> dict[str, Any]:
        return {
            "samples": len(self),
            "d_E": self.d_E,
            "d_F": self.d_F,
            "h_out": self.h_out,
            "lookback": self.lookback,
            "max_angle_change": self.max_angle_change,
            "t_start": float(self.times[0]) if len(self) else None,
            "t_end": float(self.times[-1]) if len(self) else None,
        }


@dataclass
class DominationCertificate:
    sample_count: int
    violation_count: int
    worst_ratio: float
    contraction_factor: float
    L: int
    aperture: float
    witness: dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.violation_count == 0 and self.worst_ratio <= DOMINATION_RATIO

    @property
    def violation_fraction(self) -> float:
        return self.violation_count / self.sample_count if self.sample_count else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "sample_count": self.sample_count,
            "violation_count": self.violation_count,
            "worst_ratio": self.worst_ratio,
            "contraction_factor": self.contraction_factor,
            "L": self.L,
            "aperture": self.aperture,
            "passed": self.passed,
            "witness": self.witness,
        }

    @staticmethod
    def from_dict(data: dict[str, Any]) -> "DominationCertificate":
        return DominationCertificate(
            sample_count=int(data["sample_count"]),
            violation_count=int(data["violation_count"]),
            worst_ratio=float(data["worst_ratio"]),
            contraction_factor=float(data["contraction_factor"]),
            L=int(data["L"]),
            aperture=float(data["aperture"]),
            witness=dict(data.get("witness", {})),
        )


@dataclass
class DominationSearch:
    verdict: str  # "pass" or "inconclusive"
    L: Optional[int]
    tried: list[DominationCertificate]

    def to_dict(self) -> dict[str, Any]:
        return {"verdict": self.verdict, "L": self.L, "tried": [c.to_dict() for c in self.tried]}


@dataclass
class SectionalExpansionCertificate:
    lambda_est: float
    K_est: float
    worst_plane_rate: float
    mean_rate: float
    lambda_min: float
    sample_count: int
    plane_count: int
    witness: dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.worst_plane_rate >= self.lambda_min

    def to_dict(self) -> dict[str, Any]:
        return {
            "lambda_est": self.lambda_est,
            "K_est": self.K_est,
            "worst_plane_rate": self.worst_plane_rate,
            "mean_rate": self.mean_rate,
            "lambda_min": self.lambda_min,
            "sample_count": self.sample_count,
            "plane_count": self.plane_count,
            "passed": self.passed,
            "witness": self.witness,
        }


@dataclass
class SingularityReport:
    point: list[float]
    eigenvalues: list[complex]
    stable_indices: list[int]
    center_indices: list[int]
    unstable_indices: list[int]
    hyperbolic: bool
    degenerate: bool
    sectional_rates: dict[str, float]
    min_sectional_rate: Optional[float]
    sectional_in_scope: bool
    lorenz_like: bool

    def to_dict(self) -> dict[str, Any]:
        return {
            "point": self.point,
            "eigenvalues": [[float(ev.real), float(ev.imag)] for ev in self.eigenvalues],
            "stable_indices": self.stable_indices,
            "center_indices": self.center_indices,
            "unstable_indices": self.unstable_indices,
            "hyperbolic": self.hyperbolic,
            "degenerate": self.degenerate,
            "sectional_rates": self.sectional_rates,
            "min_sectional_rate": self.min_sectional_rate,
            "sectional_in_scope": self.sectional_in_scope,
            "lorenz_like": self.lorenz_like,
            "time_one_multipliers": [
                [float(m.real), float(m.imag)] for m in np.exp(np.asarray(self.eigenvalues, dtype=complex))
            ],
        }


@dataclass
class VolumeHyperbolicityReport:
    e_rate: float
    f_rate: float
    sample_count: int
    n_steps: int

    @property
    def passed(self) -> bool:
        return self.e_rate < 0.0 < self.f_rate

    @property
    def implied_vf_lower(self) -> float:
        """−log λ for the volume-expansion constant λ = e^{−f_rate} on F."""
        return max(self.f_rate, 0.0)

    def to_dict(self) -> dict[str, Any]:
        return {
            "e_rate": self.e_rate,
            "f_rate": self.f_rate,
            "sample_count": self.sample_count,
            "n_steps": self.n_steps,
            "passed": self.passed,
            "implied_vf_lower": self.implied_vf_lower,
        }


@dataclass
class AttractionReport:
    radius: float
    n: int
    sample_count: int
    final_median: float
    final_max: float
    spacing_median: float

    @property
    def absorbed(self) -> bool:
        return self.final_median <= max(2.0 * self.spacing_median, 0.1 * self.radius)

    def to_dict(self) -> dict[str, Any]:
        return {
            "radius": self.radius,
            "n": self.n,
            "sample_count": self.sample_count,
            "final_median": self.final_median,
            "final_max": self.final_max,
            "spacing_median": self.spacing_median,
            "absorbed": self.absorbed,
        }


# ----- Lyapunov spectrum -----


def lyapunov_spectrum(
    system: FlowSystem,
    x0: Any,
    T: float,
    renorm_step: float,
    tol: float = DEFAULT_TOL,
    *,
    transient: float = 0.0,
    keep_history: bool = False,
) -> LyapunovSpectrum:
    """Benettin QR estimate of all Lyapunov exponents, sorted descending."""
    if T <= 0 or renorm_step <= 0 or renorm_step > T:
        raise ValueError(f"need 0 < renorm_step <= T, got renorm_step={renorm_step}, T={T}")
    if T < MIN_RENORM_STEPS * renorm_step * (1.0 - 1e-12):
        raise ValueError(f"T={T} is shorter than {MIN_RENORM_STEPS} renormalization steps of {renorm_step}")
    x = np.asarray(x0, dtype=float)
    if transient > 0 and not system.discrete:
        x = flow(system, x, transient, tol)
    n_steps = int(round(T / renorm_step))
    half = max(1, n_steps // 2)
    threshold = singularity_threshold(system) if not system.discrete else 0.0
    state = TangentCocycleState(point=x, frame=np.eye(system.dim))
    sums = np.zeros(system.dim)
    half_rate = np.zeros(system.dim)
    div_sum = 0.0
    hits = 0
    history: list[np.ndarray] = []
    for k in range(1, n_steps + 1):
        if not system.discrete:
            if np.linalg.norm(evaluate(system, state.point)) < threshold:
                hits += 1
            div_sum += float(np.trace(system.jacobian(state.point)))
        else:
            div_sum += float(np.log(abs(np.linalg.det(system.jacobian(state.point)))))
        state = renormalize(advance(system, state, renorm_step, tol))
        sums += state.log_r[-1]
        state.log_r.clear()
        if k == half:
            half_rate = sums / (k * renorm_step)
        if keep_history:
            history.append(sums / (k * renorm_step))
    elapsed = n_steps * renorm_step
    rates = sums / elapsed
    order = np.argsort(-rates, kind="stable")
    rates = rates[order]
    half_sorted = np.sort(half_rate)[::-1]
    drift = np.abs(rates - half_sorted)
    zero_index = None if system.discrete else int(np.argmin(np.abs(rates)))
    logger.info("lyapunov spectrum of %s over T=%g: %s (max drift %.2e)", system.name, elapsed, rates, float(np.max(drift)))
    return LyapunovSpectrum(
        exponents=rates,
        T=elapsed,
        renorm_step=renorm_step,
        drift=drift,
        converged=bool(np.all(drift < DRIFT_GATE)),
        singular_hits=hits,
        zero_index=zero_index,
        divergence_mean=div_sum / n_steps,
        history=history,
    )


# ----- Oseledets directions -----


def step_cocycles(system: FlowSystem, orbit: OrbitSegment, tol: float = DEFAULT_TOL, *, threads: int = 1) -> np.ndarray:
    """Dφ_h at each uniform sample, mapping sample j to sample j + 1."""
    n = orbit.uniform_count()
    if n < 2:
        raise ValueError("orbit needs at least two uniform samples")
    pts = orbit.points[: n - 1]
    pieces = np.array_split(np.arange(n - 1), max(1, threads))
    pieces = [p for p in pieces if len(p)]

    def run(idx: np.ndarray) -> np.ndarray:
        return tangent_flow_ensemble(system, pts[idx], orbit.h_out, tol)[1]

    return np.concatenate(thread_map(run, pieces, threads), axis=0)


def _forward_sweep(Phi: np.ndarray, k: int, start: int, rng: np.random.Generator) -> np.ndarray:
    n, dim = len(Phi) + 1, Phi.shape[1]
    out = np.full((n, dim, k), np.nan)
    Q, _ = sign_fixed_qr(rng.standard_normal((dim, k)))
    out[start] = Q
    for j in range(start, n - 1):
        Q, _ = sign_fixed_qr(Phi[j] @ Q)
        out[j + 1] = Q
    return out


def _backward_sweep(Phi: np.ndarray, k: int, stop: int, rng: np.random.Generator) -> np.ndarray:
    n, dim = len(Phi) + 1, Phi.shape[1]
    out = np.full((n, dim, k), np.nan)
    Q, _ = sign_fixed_qr(rng.standard_normal((dim, k)))
    out[stop] = Q
    for j in range(stop - 1, -1, -1):
        Q, _ = sign_fixed_qr(Phi[j].T @ Q)
        out[j] = Q
    return out


def max_principal_angle(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Largest principal angle between stacked orthonormal bases of equal rank."""
    resid = B - A @ np.swapaxes(A, -1, -2) @ B
    s = np.linalg.norm(resid, ord=2, axis=(-2, -1))
    return np.arcsin(np.clip(s, 0.0, 1.0))


def _complement(W: np.ndarray) -> np.ndarray:
    Q, _ = np.linalg.qr(W, mode="complete")
    return Q[..., W.shape[-1]:]


def oseledets_directions(
    system: FlowSystem,
    orbit: OrbitSegment,
    d_F: int,
    lookback: float = 20.0,
    tol: float = DEFAULT_TOL,
    *,
    max_lookback: float = 160.0,
    rng: Optional[np.random.Generator] = None,
    step_mats: Optional[np.ndarray] = None,
    threads: int = 1,
) -> SplittingField:
    """Backward-forward QR sweeps for the dominated pair (E, F) with dim F = d_F.

    F is the limit of forward-pushed random d_F frames; E is the orthogonal
    complement of the limit of backward-pulled adjoint frames. Doubling the
    lookback must move neither by more than ``ANGLE_GATE`` radians.
    """
    if not 1 <= d_F < system.dim:
        raise ValueError(f"d_F must satisfy 1 <= d_F < {system.dim}, got {d_F}")
    if lookback <= 0:
        raise ValueError(f"lookback must be positive, got {lookback}")
    rng = rng if rng is not None else np.random.default_rng(0)
    Phi = step_mats if step_mats is not None else step_cocycles(system, orbit, tol, threads=threads)
    n = len(Phi) + 1
    h = orbit.h_out
    L = float(lookback)
    while True:
        m = int(np.ceil(L / h))
        if 4 * m + 1 > n:
            raise ValueError(f"orbit of {n} samples is too short for lookback {L:g} (needs > {4 * m} samples)")
        F_long = _forward_sweep(Phi, d_F, 0, rng)
        F_short = _forward_sweep(Phi, d_F, m, rng)
        W_long = _backward_sweep(Phi, d_F, n - 1, rng)
        W_short = _backward_sweep(Phi, d_F, n - 1 - m, rng)
        valid = slice(2 * m, n - 2 * m)
        angle_F = max_principal_angle(F_long[valid], F_short[valid])
        angle_E = max_principal_angle(W_long[valid], W_short[valid])
        worst = float(max(np.max(angle_F), np.max(angle_E)))
        logger.debug("oseledets lookback %g: max angle change %.3e", L, worst)
        if worst < ANGLE_GATE:
            break
        if 2 * L > max_lookback:
            raise NoDominationError(
                f"Oseledets subspaces still move by {worst:.3g} rad at lookback {L:g}",
                max_angle=worst,
                lookback=L,
            )
        L *= 2
    return SplittingField(
        times=orbit.times[valid].copy(),
        points=orbit.points[valid].copy(),
        E=_complement(W_long[valid]),
        F=F_long[valid].copy(),
        h_out=h,
        lookback=L,
        max_angle_change=worst,
    )


# ----- Domination -----


def sphere_grid(d: int, n: int) -> np.ndarray:
    """Deterministic unit vectors in R^d, shape (count, d)."""
    if d < 1:
        raise ValueError(f"sphere dimension must be positive, got {d}")
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if d == 2:
        theta = 2.0 * np.pi * np.arange(n) / n
        return np.column_stack([np.cos(theta), np.sin(theta)])
    # Halton skips the origin so the Gaussian transform stays finite
    pts = qmc.Halton(d=d, scramble=False).random(n + 1)[1:]
    g = normal_dist.ppf(pts)
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def grassmann_grid(d: int, n: int) -> list[np.ndarray]:
    """Deterministic orthonormal 2-frames in R^d."""
    if d < 2:
        raise ValueError(f"need d >= 2 for planes, got {d}")
    if d == 2:
        return [np.eye(2)]
    pts = qmc.Halton(d=2 * d, scramble=False).random(n + 1)[1:]
    g = normal_dist.ppf(pts).reshape(n, d, 2)
    Q, _ = sign_fixed_qr(g)
    return list(Q)


@dataclass
class _PairCheck:
    ratio: float
    cone_factor: float
    u: np.ndarray
    v: np.ndarray


def _certify_pair(
    Phi: np.ndarray,
    E0: np.ndarray,
    F0: np.ndarray,
    E1: np.ndarray,
    F1: np.ndarray,
    aperture: float,
    grid: int,
) -> _PairCheck:
    """Norm ratio and two-sided cone contraction of one cocycle step."""
    _, sE, VtE = np.linalg.svd(Phi @ E0)
    _, sF, VtF = np.linalg.svd(Phi @ F0)
    ratio = float(sE[0] / sF[-1]) if sF[-1] > 0 else float("inf")
    u, v = E0 @ VtE[0], F0 @ VtF[-1]

    dE, dF = E0.shape[1], F0.shape[1]
    gE = sphere_grid(dE, grid).T
    gF = sphere_grid(dF, grid).T

    def boundary(core: np.ndarray, side: np.ndarray, g_core: np.ndarray, g_side: np.ndarray) -> np.ndarray:
        a = (core @ g_core)[:, :, None] + aperture * (side @ g_side)[:, None, :]
        return a.reshape(core.shape[0], -1)

    # forward F-cone
    V = boundary(F0, E0, gF, gE)
    C = np.linalg.solve(np.column_stack([E1, F1]), Phi @ V)
    fwd = np.max(np.linalg.norm(C[:dE], axis=0) / np.linalg.norm(C[dE:], axis=0)) / aperture
    # backward E-cone
    V = boundary(E1, F1, gE, gF)
    C = np.linalg.solve(np.column_stack([E0, F0]), np.linalg.solve(Phi, V))
    bwd = np.max(np.linalg.norm(C[dE:], axis=0) / np.linalg.norm(C[:dE], axis=0)) / aperture
    return _PairCheck(ratio=ratio, cone_factor=float(max(fwd, bwd)), u=u, v=v)


def _image_indices(
    field: SplittingField, L: float, sample_idx: Optional[Sequence[int]], max_samples: Optional[int]
) -> tuple[np.ndarray, int]:
    steps = int(round(L / field.h_out))
    if steps < 1 or abs(steps * field.h_out - L) > 1e-9 * max(1.0, L):
        raise ValueError(f"L={L} is not a positive multiple of the sampling step {field.h_out}")
    m = len(field)
    if sample_idx is None:
        idx = np.arange(0, max(0, m - steps))
        if max_samples is not None and len(idx) > max_samples:
            idx = idx[np.linspace(0, len(idx) - 1, max_samples).round().astype(int)]
    else:
        idx = np.asarray(sample_idx, dtype=int)
        missing = [int(i) for i in idx if i < 0 or i + steps >= m]
        if missing:
            raise CoverageError(
                f"splitting is missing at the L-image of samples {missing[:10]}", missing=missing
            )
    if len(idx) == 0:
        raise ValueError("no sample has its L-image inside the splitting field")
    return idx, steps


def check_dominated_splitting(
    system: FlowSystem,
    field: SplittingField,
    L: int,
    aperture: float,
    tol: float = DEFAULT_TOL,
    *,
    sample_idx: Optional[Sequence[int]] = None,
    max_samples: Optional[int] = None,
    grid: int = 16,
    threads: int = 1,
) -> DominationCertificate:
    """Ratio test ‖Dg^L|E‖ · ‖(Dg^L|F)^{-1}‖ ≤ 1/2 plus cone invariance at L."""
    if not 0 < aperture < 1:
        raise ValueError(f"aperture must lie in (0, 1), got {aperture}")
    idx, steps = _image_indices(field, float(L), sample_idx, max_samples)
    _, Phis = tangent_flow_ensemble(system, field.points[idx], float(L), tol)

    def check(k: int) -> _PairCheck:
        i = idx[k]
        return _certify_pair(Phis[k], field.E[i], field.F[i], field.E[i + steps], field.F[i + steps], aperture, grid)

    checks = thread_map(check, range(len(idx)), threads)
    return _collect(checks, idx, field, int(L), aperture)


def _collect(
    checks: list[_PairCheck], idx: np.ndarray, field: SplittingField, L: int, aperture: float
) -> DominationCertificate:
    ratios = np.array([c.ratio for c in checks])
    factors = np.array([c.cone_factor for c in checks])
    violations = int(np.sum((ratios > DOMINATION_RATIO) | (factors >= 1.0)))
    worst = int(np.argmax(ratios))
    cert = DominationCertificate(
        sample_count=len(checks),
        violation_count=violations,
        worst_ratio=float(ratios[worst]),
        contraction_factor=float(np.max(factors)),
        L=L,
        aperture=aperture,
        witness={
            "index": int(idx[worst]),
            "time": float(field.times[idx[worst]]),
            "point": field.points[idx[worst]].tolist(),
            "u": checks[worst].u.tolist(),
            "v": checks[worst].v.tolist(),
            "ratio": float(ratios[worst]),
        },
    )
    logger.info(
        "domination L=%d a=%g: %d/%d violations, worst ratio %.3g, cone factor %.3g",
        L, aperture, violations, len(checks), cert.worst_ratio, cert.contraction_factor,
    )
    return cert


def search_domination_step(
    system: FlowSystem,
    field: SplittingField,
    aperture: float,
    tol: float = DEFAULT_TOL,
    *,
    L_max: int = 20,
    **kwargs: Any,
) -> DominationSearch:
    """Smallest L ≤ L_max whose certificate passes."""
    tried: list[DominationCertificate] = []
    for L in range(1, L_max + 1):
        if int(round(L / field.h_out)) >= len(field):
            break
        cert = check_dominated_splitting(system, field, L, aperture, tol, **kwargs)
        tried.append(cert)
        if cert.passed:
            return DominationSearch(verdict="pass", L=L, tried=tried)
    return DominationSearch(verdict="inconclusive", L=None, tried=tried)


def _projected_bases(B: np.ndarray, E: np.ndarray, F: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """πE and πF in normal coordinates; πF keeps the top d_F − 1 directions."""
    QE, _ = np.linalg.qr(B.T @ E)
    U, _, _ = np.linalg.svd(B.T @ F)
    return QE, U[:, : F.shape[1] - 1]


def check_projected_domination(
    system: FlowSystem,
    field: SplittingField,
    L: int,
    aperture: float,
    tol: float = DEFAULT_TOL,
    *,
    sample_idx: Optional[Sequence[int]] = None,
    max_samples: Optional[int] = None,
    grid: int = 16,
) -> DominationCertificate:
    """The same certificate for (πE, πF) under ψ*, with aperture 2a."""
    if field.d_F < 2:
        raise ValueError("projected domination needs d_F >= 2 (F must contain the flow direction)")
    idx, steps = _image_indices(field, float(L), sample_idx, max_samples)
    _, Phis = tangent_flow_ensemble(system, field.points[idx], float(L), tol)
    checks = []
    for k, i in enumerate(idx):
        x0, x1 = field.points[i], field.points[i + steps]
        B0 = normal_frame(system, x0).basis
        B1 = normal_frame(system, x1).basis
        ratio = np.linalg.norm(evaluate(system, x0)) / np.linalg.norm(evaluate(system, x1))
        Psi = ratio * (B1.T @ Phis[k] @ B0)
        E0, F0 = _projected_bases(B0, field.E[i], field.F[i])
        E1, F1 = _projected_bases(B1, field.E[i + steps], field.F[i + steps])
        checks.append(_certify_pair(Psi, E0, F0, E1, F1, min(2.0 * aperture, 0.99), grid))
    return _collect(checks, idx, field, int(L), min(2.0 * aperture, 0.99))


# ----- Sectional and volume expansion -----


def check_sectional_expansion(
    system: FlowSystem,
    points: Any,
    F_bases: Any,
    T_grid: Sequence[float],
    tol: float = DEFAULT_TOL,
    *,
    planes: int = 64,
    lambda_min: float = 1e-3,
    threads: int = 1,
) -> SectionalExpansionCertificate:
    """Fit log-area growth of 2-planes inside F against t; report the worst slope."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    bases = np.asarray(F_bases, dtype=float)
    if bases.ndim == 2:
        bases = np.broadcast_to(bases, (len(pts),) + bases.shape)
    d_F = bases.shape[2]
    if d_F < 2:
        raise ValueError(f"sectional expansion needs dim F >= 2, got {d_F}")
    grid = np.asarray(T_grid, dtype=float)
    if grid.size < 2 or np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise ValueError("T_grid must hold at least two increasing positive times")
    coeffs = grassmann_grid(d_F, planes)

    def rates_at(k: int) -> tuple[np.ndarray, np.ndarray]:
        frame = np.concatenate([bases[k] @ c for c in coeffs], axis=1)
        _, frames = tangent_flow_grid(system, pts[k], grid, frame, tol)
        logs = np.empty((len(coeffs), len(grid)))
        for p in range(len(coeffs)):
            W = frames[:, :, 2 * p : 2 * p + 2]
            gram = np.swapaxes(W, 1, 2) @ W
            logs[p] = 0.5 * np.log(np.linalg.det(gram))
        slopes = np.polyfit(grid, logs.T, 1)[0]
        return slopes, logs

    results = thread_map(rates_at, range(len(pts)), threads)
    all_rates = np.array([r[0] for r in results])
    k, p = np.unravel_index(int(np.argmin(all_rates)), all_rates.shape)
    worst = float(all_rates[k, p])
    K_est = min(float(np.min(np.exp(r[1] - worst * grid))) for r in results)
    cert = SectionalExpansionCertificate(
        lambda_est=worst,
        K_est=K_est,
        worst_plane_rate=worst,
        mean_rate=float(np.mean(all_rates)),
        lambda_min=lambda_min,
        sample_count=len(pts),
        plane_count=len(coeffs),
        witness={"point": pts[k].tolist(), "plane": (bases[k] @ coeffs[p]).tolist(), "rate": worst},
    )
    logger.info("sectional expansion: worst %.4g, mean %.4g", worst, cert.mean_rate)
    return cert


def volume_hyperbolicity(
    system: FlowSystem,
    field: SplittingField,
    n_steps: int = 10,
    tol: float = DEFAULT_TOL,
    *,
    max_samples: int = 200,
) -> VolumeHyperbolicityReport:
    """Growth rates of |det Df^n|_E| (worst, i.e. largest) and |det Df^n|_F| (smallest)."""
    if n_steps < 2:
        raise ValueError(f"n_steps must be >= 2, got {n_steps}")
    idx = np.linspace(0, len(field) - 1, min(max_samples, len(field))).round().astype(int)
    grid = np.arange(1, n_steps + 1, dtype=float)
    e_rates, f_rates = [], []
    for i in idx:
        frame = np.concatenate([field.E[i], field.F[i]], axis=1)
        _, frames = tangent_flow_grid(system, field.points[i], grid, frame, tol)
        WE, WF = frames[:, :, : field.d_E], frames[:, :, field.d_E :]
        logE = 0.5 * np.log(np.linalg.det(np.swapaxes(WE, 1, 2) @ WE))
        logF = 0.5 * np.log(np.linalg.det(np.swapaxes(WF, 1, 2) @ WF))
        e_rates.append(np.polyfit(grid, logE, 1)[0])
        f_rates.append(np.polyfit(grid, logF, 1)[0])
    return VolumeHyperbolicityReport(
        e_rate=float(np.max(e_rates)), f_rate=float(np.min(f_rates)), sample_count=len(idx), n_steps=n_steps
    )


# ----- Singularities -----


def singularity_analysis(system: FlowSystem, sigma: Any, tol: float = 1e-8) -> SingularityReport:
    """Eigen-structure of DX at a zero of X, and the sectional rates on F^cu."""
    point = np.asarray(sigma, dtype=float)
    speed = float(np.linalg.norm(evaluate(system, point)))
    if speed > tol:
        raise ValueError(f"|X(sigma)| = {speed:.3g} > {tol:g}: not a singularity")
    vals = np.linalg.eigvals(system.jacobian(point))
    order = np.lexsort((np.abs(vals.imag), vals.real))
    vals = vals[order]
    gaps = [abs(a - b) for a, b in itertools.combinations(vals, 2)]
    degenerate = bool(gaps) and min(gaps) < DEGENERATE_GAP
    if degenerate:
        logger.warning("near-repeated eigenvalues at %s; subspace assignment is ambiguous", point.tolist())
    hyperbolic = bool(np.all(np.abs(vals.real) > tol))
    unstable = [i for i, ev in enumerate(vals) if ev.real > tol]
    contracting = [i for i, ev in enumerate(vals) if ev.real < -tol]
    center: list[int] = []
    if unstable and len(contracting) >= 2:
        weakest = vals[contracting[-1]].real
        center = [i for i in contracting if abs(vals[i].real - weakest) <= tol]
        if len(center) == len(contracting):
            center = []
    stable = [i for i in contracting if i not in center]
    cu = center + unstable
    rates: dict[str, float] = {}
    for i, j in itertools.combinations(cu, 2):
        rates[f"{i},{j}"] = float(vals[i].real + vals[j].real)
    in_scope = system.dim >= 3 and len(cu) >= 2
    min_rate = min(rates.values()) if rates else None
    lorenz_like = bool(in_scope and hyperbolic and center and min_rate is not None and min_rate > 0)
    return SingularityReport(
        point=point.tolist(),
        eigenvalues=[complex(v) for v in vals],
        stable_indices=stable,
        center_indices=center,
        unstable_indices=unstable,
        hyperbolic=hyperbolic,
        degenerate=degenerate,
        sectional_rates=rates,
        min_sectional_rate=min_rate,
        sectional_in_scope=in_scope,
        lorenz_like=lorenz_like,
    )


# ----- Attraction and the Lorenz-like checklist -----


def attraction_probe(
    system: FlowSystem,
    K: Any,
    radius: float,
    n: float,
    tol: float = DEFAULT_TOL,
    *,
    rng: Optional[np.random.Generator] = None,
    samples: int = 256,
) -> AttractionReport:
    """Perturb attractor samples by ``radius`` and measure their distance to K after time n."""
    pts = np.atleast_2d(np.asarray(K, dtype=float))
    rng = rng if rng is not None else np.random.default_rng(0)
    tree = cKDTree(pts)
    spacing = tree.query(pts, k=2)[0][:, 1]
    pick = rng.choice(len(pts), size=min(samples, len(pts)), replace=False)
    dirs = rng.standard_normal((len(pick), system.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    final = flow_ensemble(system, pts[pick] + radius * dirs, n, tol)
    dist = tree.query(final)[0]
    return AttractionReport(
        radius=radius,
        n=int(n),
        sample_count=len(pick),
        final_median=float(np.median(dist)),
        final_max=float(np.max(dist)),
        spacing_median=float(np.median(spacing)),
    )


def lorenz_like_checklist(
    singularities: Sequence[SingularityReport],
    attraction: Optional[AttractionReport],
    domination: Optional[DominationCertificate],
    sectional: Optional[SectionalExpansionCertificate],
) -> dict[str, Any]:
    """One verdict per ingredient of a Lorenz-like class, plus the conjunction."""
    items = {
        "singularities_hyperbolic": all(s.hyperbolic for s in singularities),
        "singularities_lorenz_like": any(s.lorenz_like for s in singularities),
        "attracting": attraction.absorbed if attraction is not None else None,
        "dominated": domination.passed if domination is not None else None,
        "sectionally_expanding": sectional.passed if sectional is not None else None,
    }
    items["lorenz_like"] = all(v is True for v in items.values())
    return items
