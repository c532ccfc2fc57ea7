"""Linear Poincaré flow ψ_t on the normal bundle and its scaled version ψ*_t.

ψ_t(x) v = O_{φ_t(x)}(Dφ_t(x) v), with O_y the orthogonal projection onto
N_y = X(y)^⊥, and ψ*_t(x) = (|X(x)| / |X(φ_t(x))|) ψ_t(x). Both are defined
only away from singularities; the threshold is a fixed fraction of the
system's ``speed_scale``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from lorenzlab.flow_core import (
    DEFAULT_TOL,
    FlowSystem,
    NearSingularityError,
    OrbitSegment,
    evaluate,
    sign_fixed_qr,
    tangent_flow,
    tangent_flow_grid,
)
from lorenzlab.parallel import thread_map

logger = logging.getLogger(__name__)

SINGULAR_FRACTION = 1e-4
PROBE_NOTE = "empirical maximum over samples, not a proven bound"

__all__ = [
    "CocycleBound",
    "CocycleSample",
    "NearSingularityError",
    "NormalFrame",
    "NormalSpectrum",
    "cocycle_bound_probe",
    "cocycle_sample",
    "linear_poincare",
    "normal_frame",
    "normal_lyapunov_spectrum",
    "normal_project",
    "scaled_poincare",
    "singularity_threshold",
]


@dataclass
class NormalFrame:
    base: np.ndarray
    flow_dir: np.ndarray
    basis: np.ndarray  # (dim, dim - 1), orthonormal and ⊥ flow_dir


@dataclass
class CocycleSample:
    x: np.ndarray
    t: float
    y: np.ndarray
    frame_x: NormalFrame
    frame_y: NormalFrame
    matrix_psi: np.ndarray
    matrix_psi_star: np.ndarray
    speed_ratio: float


@dataclass
class CocycleBound:
    tau: float
    bound: float
    witness_time: float
    witness_point: list[float]
    sample_count: int
    note: str = PROBE_NOTE

    def to_dict(self) -> dict[str, Any]:
        return {
            "tau": self.tau,
            "bound": self.bound,
            "witness_time": self.witness_time,
            "witness_point": list(self.witness_point),
            "sample_count": self.sample_count,
            "note": self.note,
        }

    @staticmethod
    def from_dict(data: dict[str, Any]) -> "CocycleBound":
        return CocycleBound(
            tau=float(data["tau"]),
            bound=float(data["bound"]),
            witness_time=float(data["witness_time"]),
            witness_point=[float(v) for v in data["witness_point"]],
            sample_count=int(data["sample_count"]),
            note=str(data.get("note", PROBE_NOTE)),
        )


@dataclass
class NormalSpectrum:
    exponents: np.ndarray
    scaled: bool
    T: float
    step: float
    history: list[np.ndarray] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "exponents": self.exponents.tolist(),
            "scaled": self.scaled,
            "T": self.T,
            "step": self.step,
        }


def singularity_threshold(system: FlowSystem) -> float:
    return SINGULAR_FRACTION * system.speed_scale


def _regular_speed(system: FlowSystem, x: np.ndarray, threshold: Optional[float], t: float = 0.0) -> np.ndarray:
    X = evaluate(system, x)
    speed = float(np.linalg.norm(X))
    limit = singularity_threshold(system) if threshold is None else threshold
    if speed < limit:
        raise NearSingularityError(
            f"|X(x)| = {speed:.3g} is below the singularity threshold {limit:.3g}", time=t, speed=speed
        )
    return X


def _project(X: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Remove the X component from a vector or from every column of a frame."""
    coeff = (X @ w) / float(X @ X)
    return w - np.multiply.outer(X, coeff) if w.ndim > 1 else w - coeff * X


def normal_project(system: FlowSystem, x: Any, v: Any, *, threshold: Optional[float] = None) -> np.ndarray:
    """O_x(v) = v − (⟨v, X(x)⟩ / |X(x)|²) X(x)."""
    X = _regular_speed(system, np.asarray(x, dtype=float), threshold)
    return _project(X, np.asarray(v, dtype=float))


def normal_frame(
    system: FlowSystem,
    x: Any,
    seed: Optional[np.ndarray] = None,
    *,
    threshold: Optional[float] = None,
) -> NormalFrame:
    """Orthonormal basis of N_x.

    Without a seed the coordinate axes least aligned with X(x) are used;
    with a seed (e.g. a transported basis) the result is its Gram-Schmidt
    completion, so nearby frames stay consistently oriented.
    """
    x = np.asarray(x, dtype=float)
    X = _regular_speed(system, x, threshold)
    u = X / np.linalg.norm(X)
    if seed is None:
        order = np.argsort(np.abs(u), kind="stable")
        seed = np.eye(system.dim)[:, order[: system.dim - 1]]
    Q, _ = sign_fixed_qr(np.column_stack([u, np.asarray(seed, dtype=float)]))
    return NormalFrame(base=x.copy(), flow_dir=u, basis=Q[:, 1:].copy())


def _poincare(
    system: FlowSystem, x: Any, v: Any, t: float, tol: float
) -> tuple[np.ndarray, np.ndarray, float]:
    x = np.asarray(x, dtype=float)
    limit = singularity_threshold(system)
    X0 = _regular_speed(system, x, limit)
    v = _project(X0, np.asarray(v, dtype=float))
    if t == 0:
        return x.copy(), v, 1.0
    y, w = tangent_flow(system, x, v, t, tol, min_speed=limit)
    X1 = _regular_speed(system, y, limit, t)
    ratio = float(np.linalg.norm(X0) / np.linalg.norm(X1))
    return y, _project(X1, w), ratio


def linear_poincare(system: FlowSystem, x: Any, v: Any, t: float, tol: float = DEFAULT_TOL) -> np.ndarray:
    """ψ_t(x) v. ``v`` is first projected onto N_x."""
    return _poincare(system, x, v, t, tol)[1]


def scaled_poincare(system: FlowSystem, x: Any, v: Any, t: float, tol: float = DEFAULT_TOL) -> np.ndarray:
    """ψ*_t(x) v = (|X(x)| / |X(φ_t x)|) ψ_t(x) v."""
    _, w, ratio = _poincare(system, x, v, t, tol)
    return ratio * w


def cocycle_sample(system: FlowSystem, x: Any, t: float, tol: float = DEFAULT_TOL) -> CocycleSample:
    """Matrices of ψ_t and ψ*_t between normal frames at x and φ_t(x)."""
    x = np.asarray(x, dtype=float)
    frame_x = normal_frame(system, x)
    limit = singularity_threshold(system)
    y, Phi = tangent_flow(system, x, np.eye(system.dim), t, tol, min_speed=limit if t else None)
    frame_y = normal_frame(system, y, seed=Phi @ frame_x.basis)
    psi = frame_y.basis.T @ Phi @ frame_x.basis
    ratio = float(np.linalg.norm(evaluate(system, x)) / np.linalg.norm(evaluate(system, y)))
    return CocycleSample(
        x=x.copy(),
        t=float(t),
        y=y,
        frame_x=frame_x,
        frame_y=frame_y,
        matrix_psi=psi,
        matrix_psi_star=ratio * psi,
        speed_ratio=ratio,
    )


def _grid_norms(system: FlowSystem, x: np.ndarray, times: np.ndarray, tol: float) -> np.ndarray:
    """‖ψ*_t(x)‖ for every t of a one-signed grid."""
    frame = normal_frame(system, x)
    speed0 = float(np.linalg.norm(evaluate(system, x)))
    points, frames = tangent_flow_grid(system, x, times, frame.basis, tol)
    Xs = system.field(points)
    norms = np.empty(len(times))
    for k, (X1, W) in enumerate(zip(Xs, frames)):
        speed1 = float(np.linalg.norm(X1))
        norms[k] = speed0 / speed1 * np.linalg.norm(_project(X1, W), 2)
    return norms


def cocycle_bound_probe(
    system: FlowSystem,
    orbit: OrbitSegment,
    tau: float,
    tol: float = DEFAULT_TOL,
    *,
    dt: float = 0.05,
    stride: int = 1,
    clip_speed: Optional[float] = None,
    threads: int = 1,
) -> CocycleBound:
    """Empirical sup of ‖ψ*_t(x)‖ over orbit samples and |t| ≤ tau.

    Times are the multiples k·dt with |k·dt| ≤ tau, so the grid for a larger
    tau contains the grid for a smaller one and the bound is monotone.
    """
    if tau < 0:
        raise ValueError(f"tau must be non-negative, got {tau}")
    if dt <= 0 or stride < 1:
        raise ValueError("dt must be positive and stride >= 1")
    limit = singularity_threshold(system) if clip_speed is None else clip_speed
    points = orbit.points[::stride]
    speeds = np.linalg.norm(system.field(points), axis=-1)
    keep = points[speeds >= limit]
    if len(keep) == 0:
        raise ValueError("no orbit sample is above the singularity threshold")
    if tau == 0:
        return CocycleBound(tau=0.0, bound=1.0, witness_time=0.0, witness_point=keep[0].tolist(), sample_count=len(keep))
    m = int(np.floor(tau / dt + 1e-9))
    fwd = dt * np.arange(m + 1)
    bwd = -fwd

    def probe(x: np.ndarray) -> tuple[float, float]:
        best, best_t = 1.0, 0.0
        for grid in (fwd, bwd):
            norms = _grid_norms(system, x, grid, tol)
            k = int(np.argmax(norms))
            if norms[k] > best:
                best, best_t = float(norms[k]), float(grid[k])
        return best, best_t

    results = thread_map(probe, list(keep), threads)
    idx = int(np.argmax([r[0] for r in results]))
    bound, t_star = results[idx]
    logger.info("cocycle bound at tau=%g: %.6g over %d samples", tau, bound, len(keep))
    return CocycleBound(
        tau=float(tau),
        bound=bound,
        witness_time=t_star,
        witness_point=keep[idx].tolist(),
        sample_count=len(keep),
    )


def normal_lyapunov_spectrum(
    system: FlowSystem,
    x0: Any,
    T: float,
    step: float,
    tol: float = DEFAULT_TOL,
    *,
    scaled: bool = False,
) -> NormalSpectrum:
    """QR spectrum of ψ (or ψ*) along the orbit of x0 over time T."""
    if T <= 0 or step <= 0 or step > T:
        raise ValueError(f"need 0 < step <= T, got step={step}, T={T}")
    limit = singularity_threshold(system)
    x = np.asarray(x0, dtype=float)
    frame = normal_frame(system, x)
    Q = np.eye(system.dim - 1)
    sums = np.zeros(system.dim - 1)
    history: list[np.ndarray] = []
    n_steps = int(round(T / step))
    elapsed = 0.0
    for k in range(n_steps):
        X0 = evaluate(system, x)
        y, W = tangent_flow(system, x, frame.basis @ Q, step, tol, min_speed=limit)
        X1 = _regular_speed(system, y, limit, elapsed + step)
        W = _project(X1, W)
        if scaled:
            W = W * (np.linalg.norm(X0) / np.linalg.norm(X1))
        frame = normal_frame(system, y, seed=W)
        Q, R = sign_fixed_qr(frame.basis.T @ W)
        sums += np.log(np.abs(np.diagonal(R)))
        elapsed += step
        x = y
        history.append(sums / elapsed)
    return NormalSpectrum(exponents=sums / elapsed, scaled=scaled, T=elapsed, step=step, history=history)
