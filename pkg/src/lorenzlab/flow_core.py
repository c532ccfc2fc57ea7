"""Vector fields, flows and the tangent (variational) flow.

Every continuous-time system is integrated with scipy's DOP853 at
``rtol = atol = tol``. A terminal event stops any integration whose state
leaves the ball of radius ``guard`` and surfaces it as ``DivergenceError``.
Discrete-map systems (``FlowSystem.step_map``) share the same record type so
the entropy tools can iterate either kind.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Any, Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-9
DIVERGENCE_GUARD = 1e4
ENSEMBLE_CHUNK = 4096

VectorField = Callable[[np.ndarray], np.ndarray]
JacobianField = Callable[[np.ndarray], np.ndarray]
StepMap = Callable[[np.ndarray], np.ndarray]


class DivergenceError(RuntimeError):
    def __init__(self, message: str, *, last_valid_time: float) -> None:
        super().__init__(message)
        self.last_valid_time = float(last_valid_time)


class NearSingularityError(ValueError):
    def __init__(self, message: str, *, time: float, speed: float) -> None:
        super().__init__(message)
        self.time = float(time)
        self.speed = float(speed)


@dataclass(frozen=True)
class FlowSystem:
    """A C¹ vector field (or a discrete map) with its analytic derivative.

    ``field`` and ``jacobian`` are batched: they accept arrays shaped
    ``(..., dim)`` and return ``(..., dim)`` and ``(..., dim, dim)``.
    """

    name: str
    dim: int
    field: VectorField
    jacobian: JacobianField
    params: dict[str, Any] = dataclasses.field(default_factory=dict)
    speed_scale: float = 1.0
    step_map: Optional[StepMap] = None
    period: Optional[float] = None

    def __post_init__(self) -> None:
        if self.step_map is None and self.dim < 2:
            raise ValueError(f"flow systems need dim >= 2, got {self.dim}")
        if self.dim < 1:
            raise ValueError(f"dim must be positive, got {self.dim}")
        if self.speed_scale <= 0:
            raise ValueError(f"speed_scale must be positive, got {self.speed_scale}")

    @property
    def discrete(self) -> bool:
        return self.step_map is not None

    def metric(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Distance along the last axis (circle distance when ``period`` is set)."""
        diff = np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))
        if self.period is not None:
            diff = np.mod(diff, self.period)
            diff = np.minimum(diff, self.period - diff)
        return np.sqrt(np.sum(diff * diff, axis=-1))

    def describe(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "dim": self.dim,
            "params": dict(self.params),
            "discrete": self.discrete,
            "speed_scale": self.speed_scale,
        }


@dataclass
class OrbitSegment:
    system: FlowSystem
    times: np.ndarray
    points: np.ndarray
    tol: float

    def __post_init__(self) -> None:
        if self.points.ndim != 2 or self.points.shape[0] != self.times.shape[0]:
            raise ValueError("orbit points must be shaped (len(times), dim)")

    def __len__(self) -> int:
        return int(self.times.shape[0])

    @property
    def t0(self) -> float:
        return float(self.times[0])

    @property
    def h_out(self) -> float:
        if len(self) < 2:
            return 0.0
        return float(self.times[1] - self.times[0])

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    def uniform_count(self) -> int:
        """Number of leading samples on the uniform ``h_out`` grid."""
        if len(self) < 3:
            return len(self)
        last_step = float(self.times[-1] - self.times[-2])
        if abs(last_step - self.h_out) <= 1e-9 * max(1.0, self.h_out):
            return len(self)
        return len(self) - 1

    def index_of(self, t: float) -> Optional[int]:
        if len(self) == 0:
            return None
        h = self.h_out or 1.0
        k = int(round((t - self.t0) / h))
        if 0 <= k < len(self) and abs(self.times[k] - t) <= 1e-6 * h:
            return k
        return None

    def window(self, start: int, stop: int) -> "OrbitSegment":
        return OrbitSegment(self.system, self.times[start:stop].copy(), self.points[start:stop].copy(), self.tol)

    def to_dict(self) -> dict[str, Any]:
        return {
            "system": self.system.name,
            "t0": self.t0,
            "h_out": self.h_out,
            "tol": self.tol,
            "n_samples": len(self),
            "start": self.points[0].tolist() if len(self) else [],
            "end": self.points[-1].tolist() if len(self) else [],
        }


@dataclass
class TangentCocycleState:
    point: np.ndarray
    frame: np.ndarray
    time: float = 0.0
    log_r: list[np.ndarray] = dataclasses.field(default_factory=list)


# ----- Built-in systems -----


def lorenz_system(sigma: float = 10.0, r: float = 28.0, b: float = 8.0 / 3.0) -> FlowSystem:
    def field(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u, v, w = x[..., 0], x[..., 1], x[..., 2]
        return np.stack([sigma * (v - u), r * u - v - u * w, u * v - b * w], axis=-1)

    def jacobian(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u, v, w = x[..., 0], x[..., 1], x[..., 2]
        out = np.zeros(x.shape[:-1] + (3, 3))
        out[..., 0, 0] = -sigma
        out[..., 0, 1] = sigma
        out[..., 1, 0] = r - w
        out[..., 1, 1] = -1.0
        out[..., 1, 2] = -u
        out[..., 2, 0] = v
        out[..., 2, 1] = u
        out[..., 2, 2] = -b
        return out

    return FlowSystem(
        name="lorenz",
        dim=3,
        field=field,
        jacobian=jacobian,
        params={"sigma": sigma, "r": r, "b": b},
        speed_scale=100.0,
    )


def linear_system(
    A: Any,
    b: Any = None,
    *,
    name: str = "linear",
    speed_scale: float = 1.0,
) -> FlowSystem:
    """X(x) = A x + b."""
    mat = np.atleast_2d(np.asarray(A, dtype=float))
    dim = mat.shape[0]
    if mat.shape != (dim, dim):
        raise ValueError(f"A must be square, got shape {mat.shape}")
    offset = np.zeros(dim) if b is None else np.asarray(b, dtype=float).reshape(dim)

    def field(x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ mat.T + offset

    def jacobian(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(mat, x.shape[:-1] + (dim, dim)).copy()

    return FlowSystem(
        name=name,
        dim=dim,
        field=field,
        jacobian=jacobian,
        params={"A": mat.tolist(), "b": offset.tolist()},
        speed_scale=speed_scale,
    )


def rotation_system(omega: float = 1.0, neutral_axis: bool = False) -> FlowSystem:
    dim = 3 if neutral_axis else 2
    mat = np.zeros((dim, dim))
    mat[0, 1] = -omega
    mat[1, 0] = omega
    system = linear_system(mat, name="rotation")
    return dataclasses.replace(system, params={"omega": omega, "neutral_axis": neutral_axis})


def hopf_saddle_system(omega: float = 1.0, mu: float = 0.5) -> FlowSystem:
    """Planar limit cycle r = 1 crossed with a linear z-axis of rate ``mu``."""

    def field(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u, v, w = x[..., 0], x[..., 1], x[..., 2]
        s = 1.0 - (u * u + v * v)
        return np.stack([u * s - omega * v, v * s + omega * u, mu * w], axis=-1)

    def jacobian(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u, v = x[..., 0], x[..., 1]
        out = np.zeros(x.shape[:-1] + (3, 3))
        out[..., 0, 0] = 1.0 - 3.0 * u * u - v * v
        out[..., 0, 1] = -2.0 * u * v - omega
        out[..., 1, 0] = -2.0 * u * v + omega
        out[..., 1, 1] = 1.0 - u * u - 3.0 * v * v
        out[..., 2, 2] = mu
        return out

    return FlowSystem(
        name="hopf_saddle",
        dim=3,
        field=field,
        jacobian=jacobian,
        params={"omega": omega, "mu": mu},
        speed_scale=max(abs(omega), 1e-3),
    )


def doubling_map() -> FlowSystem:
    def step(x: np.ndarray) -> np.ndarray:
        return np.mod(2.0 * np.asarray(x, dtype=float), 1.0)

    def field(x: np.ndarray) -> np.ndarray:
        raise ValueError("the doubling map is a discrete system with no vector field")

    def jacobian(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1] + (1, 1), 2.0)

    return FlowSystem(name="doubling", dim=1, field=field, jacobian=jacobian, step_map=step, period=1.0)


def contraction_map(dim: int = 2, factor: float = 0.5) -> FlowSystem:
    if not 0.0 < factor < 1.0:
        raise ValueError(f"contraction factor must lie in (0, 1), got {factor}")

    def step(x: np.ndarray) -> np.ndarray:
        return factor * np.asarray(x, dtype=float)

    def field(x: np.ndarray) -> np.ndarray:
        raise ValueError("the contraction map is a discrete system with no vector field")

    def jacobian(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(factor * np.eye(dim), x.shape[:-1] + (dim, dim)).copy()

    return FlowSystem(
        name="contraction",
        dim=dim,
        field=field,
        jacobian=jacobian,
        params={"dim": dim, "factor": factor},
        step_map=step,
    )


def _saddle(**_: Any) -> FlowSystem:
    return linear_system(np.diag([-2.0, 1.0]), name="saddle")


def _saddle3(**_: Any) -> FlowSystem:
    return linear_system(np.diag([-3.0, 1.0, 2.0]), name="saddle3")


def _drift_saddle(**_: Any) -> FlowSystem:
    return linear_system(np.diag([-2.0, 1.0, 0.0]), [0.0, 0.0, 1.0], name="drift_saddle")


SYSTEMS: dict[str, Callable[..., FlowSystem]] = {
    "lorenz": lorenz_system,
    "linear": linear_system,
    "saddle": _saddle,
    "saddle3": _saddle3,
    "drift_saddle": _drift_saddle,
    "rotation": rotation_system,
    "hopf_saddle": hopf_saddle_system,
    "doubling": lambda **_: doubling_map(),
    "contraction": contraction_map,
}

SYSTEM_DEFAULTS: dict[str, dict[str, Any]] = {
    "lorenz": {"sigma": 10.0, "r": 28.0, "b": 8.0 / 3.0},
    "linear": {"A": [[-2.0, 0.0], [0.0, 1.0]], "b": None},
    "saddle": {"A": "diag(-2, 1)"},
    "saddle3": {"A": "diag(-3, 1, 2)"},
    "drift_saddle": {"A": "diag(-2, 1, 0)", "b": [0.0, 0.0, 1.0]},
    "rotation": {"omega": 1.0, "neutral_axis": False},
    "hopf_saddle": {"omega": 1.0, "mu": 0.5},
    "doubling": {},
    "contraction": {"dim": 2, "factor": 0.5},
}


def build_system(name: str, **params: Any) -> FlowSystem:
    try:
        factory = SYSTEMS[name]
    except KeyError:
        raise ValueError(f"Unknown system '{name}'. Known: {', '.join(sorted(SYSTEMS))}") from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise ValueError(f"Bad parameters for system '{name}': {exc}") from exc


# ----- Evaluation -----


def _as_point(system: FlowSystem, x: Any) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.shape != (system.dim,):
        raise ValueError(f"{system.name}: expected a point of shape ({system.dim},), got {arr.shape}")
    return arr


def _check_tol(tol: float) -> None:
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol}")


def evaluate(system: FlowSystem, x: Any) -> np.ndarray:
    """X(x)."""
    return np.asarray(system.field(_as_point(system, x)), dtype=float)


def divergence(system: FlowSystem, x: Any) -> float:
    return float(np.trace(system.jacobian(_as_point(system, x))))


def check_jacobian(system: FlowSystem, points: Any, step: float = 1e-6) -> float:
    """Max relative error of ``system.jacobian`` against central differences."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    worst = 0.0
    for x in pts:
        h = step * max(1.0, float(np.linalg.norm(x)))
        fd = np.empty((system.dim, system.dim))
        for j in range(system.dim):
            e = np.zeros(system.dim)
            e[j] = h
            fd[:, j] = (system.field(x + e) - system.field(x - e)) / (2.0 * h)
        exact = system.jacobian(x)
        scale = max(float(np.linalg.norm(exact)), 1e-12)
        worst = max(worst, float(np.linalg.norm(exact - fd)) / scale)
    return worst


# ----- Integration -----


def _guard_event(dim: int, width: int, guard: float) -> Callable[[float, np.ndarray], float]:
    def event(t: float, y: np.ndarray) -> float:
        base = y.reshape(-1, width)[:, :dim]
        return guard - float(np.linalg.norm(base, axis=1).max())

    event.terminal = True  # type: ignore[attr-defined]
    event.direction = -1  # type: ignore[attr-defined]
    return event


def _integrate(
    rhs: Callable[[float, np.ndarray], np.ndarray],
    y0: np.ndarray,
    t_end: float,
    tol: float,
    *,
    dim: int,
    width: int,
    guard: float,
    t_eval: Optional[np.ndarray] = None,
    extra_events: tuple = (),
) -> Any:
    events = [_guard_event(dim, width, guard), *extra_events]
    sol = solve_ivp(
        rhs,
        (0.0, float(t_end)),
        y0,
        method="DOP853",
        rtol=tol,
        atol=tol,
        t_eval=t_eval,
        events=events,
    )
    if sol.status == 1 and len(sol.t_events[0]):
        t_bad = float(sol.t_events[0][0])
        raise DivergenceError(f"state left the guard ball |x| <= {guard:g} at t={t_bad:.6g}", last_valid_time=t_bad)
    if sol.status == -1:
        t_last = float(sol.t[-1]) if len(sol.t) else 0.0
        raise DivergenceError(f"integration failed: {sol.message}", last_valid_time=t_last)
    return sol


def flow(
    system: FlowSystem,
    x: Any,
    t: float,
    tol: float = DEFAULT_TOL,
    *,
    guard: float = DIVERGENCE_GUARD,
) -> np.ndarray:
    """φ_t(x). Negative ``t`` integrates backwards."""
    x = _as_point(system, x)
    _check_tol(tol)
    if not np.isfinite(t):
        raise ValueError(f"t must be finite, got {t}")
    if t == 0:
        return x.copy()
    if system.discrete:
        raise ValueError(f"{system.name} is a discrete map; use time_one_map")

    def rhs(_: float, y: np.ndarray) -> np.ndarray:
        return system.field(y)

    sol = _integrate(rhs, x, t, tol, dim=system.dim, width=system.dim, guard=guard)
    return sol.y[:, -1].copy()


def time_one_map(system: FlowSystem, x: Any, tol: float = DEFAULT_TOL) -> np.ndarray:
    """f(x) = φ_1(x), or one step of a discrete map."""
    if system.discrete:
        return np.asarray(system.step_map(_as_point(system, x)), dtype=float)  # type: ignore[misc]
    return flow(system, x, 1.0, tol)


def flow_grid(
    system: FlowSystem,
    x: Any,
    times: Any,
    tol: float = DEFAULT_TOL,
    *,
    guard: float = DIVERGENCE_GUARD,
) -> np.ndarray:
    """φ_t(x) for every t in a one-signed, monotone grid; shape (len(times), dim)."""
    x = _as_point(system, x)
    grid = _check_grid(times)
    t_end = float(grid[np.argmax(np.abs(grid))])
    if t_end == 0.0:
        return np.tile(x, (len(grid), 1))

    def rhs(_: float, y: np.ndarray) -> np.ndarray:
        return system.field(y)

    sol = _integrate(rhs, x, t_end, tol, dim=system.dim, width=system.dim, guard=guard, t_eval=grid)
    return sol.y.T.copy()


def _check_grid(times: Any) -> np.ndarray:
    grid = np.asarray(times, dtype=float).ravel()
    if grid.size == 0:
        raise ValueError("time grid is empty")
    if np.any(grid > 0) and np.any(grid < 0):
        raise ValueError("time grid must not change sign")
    steps = np.diff(grid)
    if grid.size > 1 and not (np.all(steps > 0) or np.all(steps < 0)):
        raise ValueError("time grid must be strictly monotone")
    return grid


def _speed_event(system: FlowSystem, min_speed: float) -> Callable[[float, np.ndarray], float]:
    def event(t: float, y: np.ndarray) -> float:
        return float(np.linalg.norm(system.field(y[: system.dim]))) - min_speed

    event.terminal = True  # type: ignore[attr-defined]
    event.direction = -1  # type: ignore[attr-defined]
    return event


def tangent_flow(
    system: FlowSystem,
    x: Any,
    v: Any,
    t: float,
    tol: float = DEFAULT_TOL,
    *,
    min_speed: Optional[float] = None,
    guard: float = DIVERGENCE_GUARD,
) -> tuple[np.ndarray, np.ndarray]:
    """(φ_t(x), Dφ_t(x) v). ``v`` may be a vector or a frame of column vectors."""
    x = _as_point(system, x)
    _check_tol(tol)
    vecs = np.asarray(v, dtype=float)
    column = vecs.ndim == 1
    frame = vecs.reshape(system.dim, -1) if column else vecs
    if frame.shape[0] != system.dim:
        raise ValueError(f"tangent vectors must have leading dimension {system.dim}, got {frame.shape}")
    if t == 0:
        return x.copy(), vecs.copy()
    if system.discrete:
        raise ValueError(f"{system.name} is a discrete map; tangent flow is undefined")
    dim, k = system.dim, frame.shape[1]

    def rhs(_: float, y: np.ndarray) -> np.ndarray:
        p = y[:dim]
        V = y[dim:].reshape(dim, k)
        return np.concatenate([system.field(p), (system.jacobian(p) @ V).ravel()])

    extra: tuple = ()
    if min_speed is not None:
        extra = (_speed_event(system, min_speed),)
    y0 = np.concatenate([x, frame.ravel()])
    sol = _integrate(rhs, y0, t, tol, dim=dim, width=y0.size, guard=guard, extra_events=extra)
    if min_speed is not None and len(sol.t_events[1]):
        t_hit = float(sol.t_events[1][0])
        speed = float(np.linalg.norm(system.field(sol.y_events[1][0][:dim])))
        raise NearSingularityError(
            f"orbit speed fell below {min_speed:.3g} at t={t_hit:.6g}", time=t_hit, speed=speed
        )
    end = sol.y[:, -1]
    out = end[dim:].reshape(dim, k)
    return end[:dim].copy(), (out[:, 0].copy() if column else out.copy())


def tangent_flow_grid(
    system: FlowSystem,
    x: Any,
    times: Any,
    v: Any = None,
    tol: float = DEFAULT_TOL,
    *,
    guard: float = DIVERGENCE_GUARD,
) -> tuple[np.ndarray, np.ndarray]:
    """Points (m, dim) and transported frames (m, dim, k) on a one-signed grid.

    ``v`` defaults to the identity, giving Dφ_t(x) itself.
    """
    x = _as_point(system, x)
    _check_tol(tol)
    grid = _check_grid(times)
    frame = np.eye(system.dim) if v is None else np.asarray(v, dtype=float).reshape(system.dim, -1)
    dim, k = system.dim, frame.shape[1]
    t_end = float(grid[np.argmax(np.abs(grid))])
    if t_end == 0.0:
        return np.tile(x, (len(grid), 1)), np.tile(frame, (len(grid), 1, 1))

    def rhs(_: float, y: np.ndarray) -> np.ndarray:
        p = y[:dim]
        V = y[dim:].reshape(dim, k)
        return np.concatenate([system.field(p), (system.jacobian(p) @ V).ravel()])

    y0 = np.concatenate([x, frame.ravel()])
    sol = _integrate(rhs, y0, t_end, tol, dim=dim, width=y0.size, guard=guard, t_eval=grid)
    states = sol.y.T
    return states[:, :dim].copy(), states[:, dim:].reshape(-1, dim, k).copy()


def _chunks(n: int, size: int = ENSEMBLE_CHUNK) -> list[slice]:
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def flow_ensemble(
    system: FlowSystem,
    X: Any,
    t: float,
    tol: float = DEFAULT_TOL,
    *,
    guard: float = DIVERGENCE_GUARD,
) -> np.ndarray:
    """φ_t applied to every row of ``X`` as one vectorized ODE per chunk."""
    pts = np.atleast_2d(np.asarray(X, dtype=float))
    if pts.shape[1] != system.dim:
        raise ValueError(f"ensemble must be shaped (N, {system.dim}), got {pts.shape}")
    _check_tol(tol)
    if t == 0 or len(pts) == 0:
        return pts.copy()
    if system.discrete:
        raise ValueError(f"{system.name} is a discrete map; use iterate_ensemble")
    dim = system.dim

    def rhs(_: float, y: np.ndarray) -> np.ndarray:
        return system.field(y.reshape(-1, dim)).ravel()

    out = np.empty_like(pts)
    for sl in _chunks(len(pts)):
        sol = _integrate(rhs, pts[sl].ravel(), t, tol, dim=dim, width=dim, guard=guard)
        out[sl] = sol.y[:, -1].reshape(-1, dim)
    return out


def tangent_flow_ensemble(
    system: FlowSystem,
    X: Any,
    t: float,
    tol: float = DEFAULT_TOL,
    *,
    guard: float = DIVERGENCE_GUARD,
) -> tuple[np.ndarray, np.ndarray]:
    """(φ_t(x_i), Dφ_t(x_i)) for every row; shapes (N, dim) and (N, dim, dim)."""
    pts = np.atleast_2d(np.asarray(X, dtype=float))
    dim = system.dim
    if pts.shape[1] != dim:
        raise ValueError(f"ensemble must be shaped (N, {dim}), got {pts.shape}")
    _check_tol(tol)
    n = len(pts)
    if t == 0 or n == 0:
        return pts.copy(), np.tile(np.eye(dim), (n, 1, 1))
    if system.discrete:
        raise ValueError(f"{system.name} is a discrete map; tangent flow is undefined")
    width = dim + dim * dim

    def rhs(_: float, y: np.ndarray) -> np.ndarray:
        state = y.reshape(-1, width)
        p = state[:, :dim]
        V = state[:, dim:].reshape(-1, dim, dim)
        dV = np.matmul(system.jacobian(p), V)
        return np.concatenate([system.field(p), dV.reshape(-1, dim * dim)], axis=1).ravel()

    points = np.empty_like(pts)
    mats = np.empty((n, dim, dim))
    for sl in _chunks(n):
        m = sl.stop - sl.start
        y0 = np.concatenate([pts[sl], np.tile(np.eye(dim).ravel(), (m, 1))], axis=1).ravel()
        sol = _integrate(rhs, y0, t, tol, dim=dim, width=width, guard=guard)
        end = sol.y[:, -1].reshape(m, width)
        points[sl] = end[:, :dim]
        mats[sl] = end[:, dim:].reshape(m, dim, dim)
    return points, mats


def integrate_orbit(
    system: FlowSystem,
    x0: Any,
    duration: float,
    h_out: float,
    tol: float = DEFAULT_TOL,
    *,
    transient: float = 0.0,
    guard: float = DIVERGENCE_GUARD,
) -> OrbitSegment:
    """Sample φ_t(x0) every ``h_out`` over ``[0, duration]`` after an optional transient."""
    if duration <= 0 or h_out <= 0:
        raise ValueError(f"duration and h_out must be positive, got {duration}, {h_out}")
    if system.discrete:
        raise ValueError(f"{system.name} is a discrete map; orbits are iterate_ensemble's job")
    x = _as_point(system, x0)
    if transient > 0:
        x = flow(system, x, transient, tol, guard=guard)
    n = int(np.floor(duration / h_out + 1e-9))
    times = h_out * np.arange(n + 1)
    if duration - times[-1] > 1e-9 * h_out:
        times = np.append(times, duration)
    points = flow_grid(system, x, times, tol, guard=guard)
    logger.debug("integrated %s orbit: %d samples, h_out=%g", system.name, len(times), h_out)
    return OrbitSegment(system=system, times=times, points=points, tol=tol)


# ----- Cocycle state -----


def sign_fixed_qr(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """QR with a non-negative diagonal of R (stacked input allowed)."""
    Q, R = np.linalg.qr(mat)
    diag = np.diagonal(R, axis1=-2, axis2=-1)
    signs = np.where(diag < 0, -1.0, 1.0)
    return Q * signs[..., None, :], R * signs[..., :, None]


def advance(system: FlowSystem, state: TangentCocycleState, t: float, tol: float = DEFAULT_TOL) -> TangentCocycleState:
    if system.discrete:
        point, frame = state.point, np.asarray(state.frame, dtype=float)
        for _ in range(int(round(t))):
            frame = system.jacobian(point) @ frame
            point = np.asarray(system.step_map(point), dtype=float)  # type: ignore[misc]
    else:
        point, frame = tangent_flow(system, state.point, state.frame, t, tol)
    return TangentCocycleState(point=point, frame=frame, time=state.time + t, log_r=state.log_r)


def renormalize(state: TangentCocycleState) -> TangentCocycleState:
    """Replace the frame by its Q factor and append log|diag R| to the shared log."""
    Q, R = sign_fixed_qr(np.asarray(state.frame, dtype=float).reshape(len(state.point), -1))
    diag = np.abs(np.diagonal(R))
    logs = np.log(np.where(diag > 0, diag, np.finfo(float).tiny))
    state.log_r.append(logs)
    return TangentCocycleState(point=state.point.copy(), frame=Q, time=state.time, log_r=state.log_r)
