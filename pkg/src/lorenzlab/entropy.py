"""Topological entropy from (n, ε)-spanning counts, disk volume growth and
Bowen-ball expansiveness.

Dynamical balls use the product distance max_{0≤j<n} d(f^j x, f^j y) of
time-one iterates (or map iterates in discrete mode). Greedy covers run in
a fixed seeded order and prune candidates with a spatial hash built on the
last iterate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from lorenzlab.flow_core import (
    DEFAULT_TOL,
    DivergenceError,
    FlowSystem,
    evaluate,
    flow,
    flow_ensemble,
    time_one_map,
)
from lorenzlab.parallel import thread_map
from lorenzlab.spatial import SpatialHash

logger = logging.getLogger(__name__)

SATURATION = 0.5
MONOTONE_SLACK = 0.05
COLLAPSE_ASPECT = 1e3
QUALITY_ASPECT = 20.0

__all__ = [
    "BallMembership",
    "DiskMesh",
    "DynamicalBallSpec",
    "EntropyEstimate",
    "ExpansivenessProbe",
    "MeshRefinementError",
    "SpanningCount",
    "VolumeExpansion",
    "ball_membership",
    "disk_volume_expansion",
    "entropy_estimate",
    "expansiveness_probe",
    "greedy_cover",
    "iterate_ensemble",
    "seed_disk",
    "seeded_order",
    "spanning_count",
    "tangent_check",
]


class MeshRefinementError(RuntimeError):
    def __init__(self, message: str, *, last_valid_step: int) -> None:
        super().__init__(message)
        self.last_valid_step = int(last_valid_step)


@dataclass(frozen=True)
class DynamicalBallSpec:
    center: tuple[float, ...]
    n: int
    eps: float

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")


@dataclass(frozen=True)
class BallMembership:
    inside: bool
    diverged: bool = False

    def __bool__(self) -> bool:
        return self.inside


@dataclass
class SpanningCount:
    upper: int
    lower: int
    n: int
    eps: float
    diverged: int = 0
    partial: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "upper": self.upper,
            "lower": self.lower,
            "n": self.n,
            "eps": self.eps,
            "diverged": self.diverged,
            "partial": self.partial,
        }


@dataclass
class EntropyEstimate:
    eps_grid: list[float]
    n_grid: list[int]
    upper: np.ndarray  # (len(eps_grid), len(n_grid))
    lower: np.ndarray
    upper_slopes: list[float]
    lower_slopes: list[float]
    h_lower: float
    h_upper: float
    flags: list[str] = field(default_factory=list)
    sample_size: int = 0
    achieved_n: Optional[int] = None

    def lower_slope_at(self, eps: float) -> float:
        """Separated-set slope at one grid scale."""
        for a, e in enumerate(self.eps_grid):
            if math.isclose(e, eps, rel_tol=1e-9):
                return self.lower_slopes[a]
        raise KeyError(f"eps={eps:g} is not on the grid {self.eps_grid}")

    def rows(self) -> list[dict[str, Any]]:
        """CSV rows (n, eps, upper, lower, slope)."""
        out = []
        for a, eps in enumerate(self.eps_grid):
            for b, n in enumerate(self.n_grid):
                out.append(
                    {
                        "n": n,
                        "eps": eps,
                        "upper": int(self.upper[a, b]),
                        "lower": int(self.lower[a, b]),
                        "slope": self.upper_slopes[a],
                    }
                )
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "eps_grid": self.eps_grid,
            "n_grid": self.n_grid,
            "upper": self.upper.tolist(),
            "lower": self.lower.tolist(),
            "upper_slopes": self.upper_slopes,
            "lower_slopes": self.lower_slopes,
            "h_lower": self.h_lower,
            "h_upper": self.h_upper,
            "flags": self.flags,
            "sample_size": self.sample_size,
            "achieved_n": self.achieved_n,
        }

    @staticmethod
    def from_dict(data: dict[str, Any]) -> "EntropyEstimate":
        return EntropyEstimate(
            eps_grid=[float(e) for e in data["eps_grid"]],
            n_grid=[int(n) for n in data["n_grid"]],
            upper=np.asarray(data["upper"], dtype=int),
            lower=np.asarray(data["lower"], dtype=int),
            upper_slopes=[float(s) for s in data["upper_slopes"]],
            lower_slopes=[float(s) for s in data["lower_slopes"]],
            h_lower=float(data["h_lower"]),
            h_upper=float(data["h_upper"]),
            flags=list(data.get("flags", [])),
            sample_size=int(data.get("sample_size", 0)),
            achieved_n=data.get("achieved_n"),
        )


@dataclass
class DiskMesh:
    vertices: np.ndarray  # (V, dim)
    simplices: np.ndarray  # (S, k + 1)
    tangent_angle: Optional[float] = None

    def __post_init__(self) -> None:
        if self.simplices.ndim != 2 or self.simplices.shape[1] not in (2, 3):
            raise ValueError("only segment (k=1) and triangle (k=2) meshes are supported")

    @property
    def k(self) -> int:
        return int(self.simplices.shape[1] - 1)

    def edges(self) -> np.ndarray:
        """Edge vectors per simplex from its first vertex, shape (S, dim, k)."""
        v = self.vertices[self.simplices]
        return np.swapaxes(v[:, 1:] - v[:, :1], 1, 2)

    def volumes(self) -> np.ndarray:
        E = self.edges()
        gram = np.swapaxes(E, 1, 2) @ E
        det = np.clip(np.linalg.det(gram), 0.0, None)
        return np.sqrt(det) / math.factorial(self.k)

    def total_volume(self) -> float:
        return float(np.sum(self.volumes()))

    def edge_lengths(self) -> np.ndarray:
        v = self.vertices[self.simplices]
        if self.k == 1:
            return np.linalg.norm(v[:, 1] - v[:, 0], axis=1)[:, None]
        return np.stack(
            [
                np.linalg.norm(v[:, 1] - v[:, 0], axis=1),
                np.linalg.norm(v[:, 2] - v[:, 1], axis=1),
                np.linalg.norm(v[:, 0] - v[:, 2], axis=1),
            ],
            axis=1,
        )

    def aspect_ratios(self) -> np.ndarray:
        """Longest edge × perimeter / (4√3 area); 1 for an equilateral triangle."""
        if self.k == 1:
            return np.ones(len(self.simplices))
        lengths = self.edge_lengths()
        area = self.volumes()
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = lengths.max(axis=1) * lengths.sum(axis=1) / (4.0 * math.sqrt(3.0) * area)
        return np.where(area > 0, ratio, np.inf)

    def to_off(self) -> str:
        lines = ["OFF", f"{len(self.vertices)} {len(self.simplices)} 0"]
        lines.extend(" ".join(f"{c:.10g}" for c in v) for v in self.vertices)
        lines.extend(f"{self.k + 1} " + " ".join(str(int(i)) for i in s) for s in self.simplices)
        return "\n".join(lines) + "\n"


@dataclass
class VolumeExpansion:
    v_F: float
    log_volumes: list[float]
    max_ball_volumes: list[float]
    ball_slope: float
    worst_aspect: float
    vertex_count: int
    saturated: bool
    steps_completed: int

    @property
    def quality_ok(self) -> bool:
        return self.worst_aspect < QUALITY_ASPECT

    def to_dict(self) -> dict[str, Any]:
        return {
            "v_F": self.v_F,
            "log_volumes": self.log_volumes,
            "max_ball_volumes": self.max_ball_volumes,
            "ball_slope": self.ball_slope,
            "worst_aspect": self.worst_aspect,
            "quality_ok": self.quality_ok,
            "vertex_count": self.vertex_count,
            "saturated": self.saturated,
            "steps_completed": self.steps_completed,
        }


@dataclass
class ExpansivenessProbe:
    slope: float
    collapse: float
    survivors: list[int]
    counts: list[int]
    n_grid: list[int]
    survival_fraction: list[float]
    escape_rate: float
    low_confidence: bool
    delta: float
    eps_inner: float
    note: str = "forward Bowen balls only; the two-sided ball is not probed"

    def to_dict(self) -> dict[str, Any]:
        return {
            "slope": self.slope,
            "collapse": self.collapse,
            "survivors": self.survivors,
            "counts": self.counts,
            "n_grid": self.n_grid,
            "survival_fraction": self.survival_fraction,
            "escape_rate": self.escape_rate,
            "low_confidence": self.low_confidence,
            "delta": self.delta,
            "eps_inner": self.eps_inner,
            "note": self.note,
        }


# ----- Iteration -----


def _step(system: FlowSystem, X: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray]:
    """One application of f to every row; rows that diverge come back NaN."""
    if system.discrete:
        return np.asarray(system.step_map(X), dtype=float), np.zeros(len(X), dtype=bool)  # type: ignore[misc]
    try:
        return flow_ensemble(system, X, 1.0, tol), np.zeros(len(X), dtype=bool)
    except DivergenceError:
        out = np.full_like(X, np.nan)
        bad = np.zeros(len(X), dtype=bool)
        for i, x in enumerate(X):
            try:
                out[i] = flow(system, x, 1.0, tol)
            except DivergenceError:
                bad[i] = True
        return out, bad


def iterate_ensemble(
    system: FlowSystem, K: Any, n: int, tol: float = DEFAULT_TOL, *, threads: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Iterates f^j(K) for 0 ≤ j < n as (N, n, dim), plus a divergence mask."""
    pts = np.atleast_2d(np.asarray(K, dtype=float))
    if pts.shape[1] != system.dim:
        raise ValueError(f"K must be shaped (N, {system.dim}), got {pts.shape}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    pieces = [p for p in np.array_split(np.arange(len(pts)), max(1, threads)) if len(p)]

    def run(idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        cur = pts[idx]
        traj = np.empty((len(idx), n, system.dim))
        dead = ~np.all(np.isfinite(cur), axis=1)
        traj[:, 0] = cur
        for j in range(1, n):
            live = ~dead
            nxt = np.full_like(cur, np.nan)
            if np.any(live):
                nxt[live], bad = _step(system, cur[live], tol)
                dead[np.flatnonzero(live)[bad]] = True
            traj[:, j] = nxt
            cur = nxt
        return traj, dead

    parts = thread_map(run, pieces, threads)
    traj = np.concatenate([p[0] for p in parts], axis=0)
    dead = np.concatenate([p[1] for p in parts], axis=0)
    if np.any(dead):
        logger.warning("%d of %d points diverged while iterating", int(dead.sum()), len(pts))
    return traj, dead


def ball_membership(
    system: FlowSystem, spec: DynamicalBallSpec, y: Any, tol: float = DEFAULT_TOL
) -> BallMembership:
    """y ∈ B_n(center, eps)."""
    a = np.asarray(spec.center, dtype=float)
    b = np.asarray(y, dtype=float)
    for j in range(spec.n):
        if j:
            try:
                a, b = time_one_map(system, a, tol), time_one_map(system, b, tol)
            except DivergenceError:
                return BallMembership(inside=False, diverged=True)
        if float(system.metric(a, b)) > spec.eps:
            return BallMembership(inside=False)
    return BallMembership(inside=True)


# ----- Spanning and separated sets -----


def seeded_order(count: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    rng = rng if rng is not None else np.random.default_rng(0)
    return rng.permutation(count)


def _bowen(system: FlowSystem, a: np.ndarray, B: np.ndarray) -> np.ndarray:
    """max_j d(a_j, B_ij) for each row i of B; NaN iterates count as infinitely far."""
    d = system.metric(B, a[None, :, :])
    d = np.where(np.isfinite(d), d, np.inf)
    return np.max(d, axis=1)


def greedy_cover(system: FlowSystem, traj: np.ndarray, radius: float, order: Sequence[int]) -> list[int]:
    """Centers of a greedy cover by closed Bowen balls of ``radius``.

    The centers are pairwise more than ``radius`` apart, so they also form a
    maximal separated set at that scale.
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    dim = traj.shape[2]
    index = SpatialHash(radius / math.sqrt(dim), dim, period=system.period)
    centers: list[int] = []
    for i in order:
        row = traj[i]
        if not np.all(np.isfinite(row)):
            continue
        cand = index.candidates(row[-1], radius)
        if cand and np.any(_bowen(system, row, traj[cand]) <= radius):
            continue
        centers.append(int(i))
        index.insert(int(i), row[-1])
    return centers


def _budgeted_n(n: int, size: int, budget: Optional[int]) -> tuple[int, bool]:
    if budget is None or n * size <= budget:
        return n, False
    achieved = max(1, budget // max(size, 1))
    logger.warning("iteration budget %d allows n=%d of the requested %d", budget, achieved, n)
    return min(achieved, n), True


def spanning_count(
    system: FlowSystem,
    K: Any,
    n: int,
    eps: float,
    tol: float = DEFAULT_TOL,
    *,
    rng: Optional[np.random.Generator] = None,
    budget: Optional[int] = None,
    threads: int = 1,
) -> SpanningCount:
    """(greedy ε-cover size, greedy 2ε-separated size) of K at length n."""
    pts = np.atleast_2d(np.asarray(K, dtype=float))
    if len(pts) == 0:
        raise ValueError("K is empty")
    n_eff, partial = _budgeted_n(n, len(pts), budget)
    traj, dead = iterate_ensemble(system, pts, n_eff, tol, threads=threads)
    order = seeded_order(len(pts), rng)
    upper = len(greedy_cover(system, traj, eps, order))
    lower = len(greedy_cover(system, traj, 2.0 * eps, order))
    return SpanningCount(upper=upper, lower=lower, n=n_eff, eps=eps, diverged=int(dead.sum()), partial=partial)


def _fit_slope(ns: np.ndarray, counts: np.ndarray, cap: float) -> tuple[float, bool]:
    usable = counts < cap
    saturated = int(np.sum(usable)) < 3
    if saturated:
        usable = np.zeros_like(usable)
        usable[: min(3, len(ns))] = True
    return float(np.polyfit(ns[usable], np.log(counts[usable]), 1)[0]), saturated


def entropy_estimate(
    system: FlowSystem,
    K: Any,
    eps_grid: Sequence[float],
    n_grid: Sequence[int],
    tol: float = DEFAULT_TOL,
    *,
    rng: Optional[np.random.Generator] = None,
    budget: Optional[int] = None,
    threads: int = 1,
) -> EntropyEstimate:
    """h(ε) slopes of log counts against n, and brackets for h_top."""
    eps_list = sorted((float(e) for e in eps_grid), reverse=True)
    n_list = sorted(int(n) for n in n_grid)
    if len(eps_list) < 3 or len(n_list) < 3:
        raise ValueError("entropy_estimate needs at least three values on each grid")
    if n_list[0] < 1 or eps_list[-1] <= 0:
        raise ValueError("n values must be >= 1 and eps values positive")
    pts = np.atleast_2d(np.asarray(K, dtype=float))
    n_max, partial = _budgeted_n(n_list[-1], len(pts), budget)
    flags: list[str] = []
    if partial:
        n_list = [n for n in n_list if n <= n_max]
        flags.append("budget_exceeded")
        if len(n_list) < 3:
            raise ValueError(f"budget leaves only n <= {n_max}; fewer than three grid values remain")
    traj, dead = iterate_ensemble(system, pts, n_list[-1], tol, threads=threads)
    if np.any(dead):
        flags.append("divergence")
    order = seeded_order(len(pts), rng)
    upper = np.zeros((len(eps_list), len(n_list)), dtype=int)
    lower = np.zeros_like(upper)
    for a, eps in enumerate(eps_list):
        for b, n in enumerate(n_list):
            sub = traj[:, :n]
            upper[a, b] = len(greedy_cover(system, sub, eps, order))
            lower[a, b] = len(greedy_cover(system, sub, 2.0 * eps, order))
    cap = SATURATION * len(pts)
    ns = np.asarray(n_list, dtype=float)
    up_slopes, low_slopes = [], []
    for a in range(len(eps_list)):
        s_up, sat_up = _fit_slope(ns, upper[a].astype(float), cap)
        s_low, sat_low = _fit_slope(ns, lower[a].astype(float), cap)
        up_slopes.append(s_up)
        low_slopes.append(s_low)
        if sat_up or sat_low:
            flags.append(f"saturated eps={eps_list[a]:g}")
    if np.any(np.diff(upper, axis=1) < 0) or np.any(np.diff(lower, axis=1) < 0):
        flags.append("counts decrease in n")
    # eps_list is descending, so h(eps) should not decrease along it
    if np.any(np.diff(up_slopes) < -MONOTONE_SLACK):
        flags.append("non-monotone in eps: insufficient sampling")
    est = EntropyEstimate(
        eps_grid=eps_list,
        n_grid=n_list,
        upper=upper,
        lower=lower,
        upper_slopes=up_slopes,
        lower_slopes=low_slopes,
        h_lower=float(max(low_slopes)),
        h_upper=float(max(up_slopes)),
        flags=flags,
        sample_size=len(pts),
        achieved_n=n_list[-1],
    )
    logger.info("entropy brackets [%.4f, %.4f] from %d points", est.h_lower, est.h_upper, len(pts))
    return est


# ----- Disk volume growth -----


def seed_disk(center: Any, basis: Any, radius: float, resolution: int) -> DiskMesh:
    """Flat square disk (k=2) or segment (k=1) spanned by ``basis`` columns."""
    c = np.asarray(center, dtype=float)
    B = np.asarray(basis, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    k = B.shape[1]
    if resolution < 1:
        raise ValueError(f"resolution must be >= 1, got {resolution}")
    s = np.linspace(-radius, radius, resolution + 1)
    if k == 1:
        verts = c + s[:, None] * B[:, 0]
        simp = np.column_stack([np.arange(resolution), np.arange(1, resolution + 1)])
    elif k == 2:
        uu, vv = np.meshgrid(s, s, indexing="ij")
        verts = c + uu.ravel()[:, None] * B[:, 0] + vv.ravel()[:, None] * B[:, 1]
        r = resolution + 1
        tris = []
        for i in range(resolution):
            for j in range(resolution):
                a, b, d, e = i * r + j, (i + 1) * r + j, i * r + j + 1, (i + 1) * r + j + 1
                tris.append((a, b, e))
                tris.append((a, e, d))
        simp = np.asarray(tris)
    else:
        raise ValueError(f"disks of dimension {k} are not supported (only 1 and 2)")
    return DiskMesh(vertices=verts, simplices=simp.astype(np.int64))


def tangent_check(mesh: DiskMesh, F_basis: Any) -> float:
    """Largest principal angle between any simplex and span(F_basis)."""
    F, _ = np.linalg.qr(np.asarray(F_basis, dtype=float).reshape(mesh.vertices.shape[1], -1))
    Q, _ = np.linalg.qr(mesh.edges())
    s = np.linalg.svd(F.T[None] @ Q, compute_uv=False)
    angle = float(np.max(np.arccos(np.clip(s.min(axis=1), -1.0, 1.0))))
    mesh.tangent_angle = angle
    return angle


def _map_points(system: FlowSystem, P: np.ndarray, tol: float) -> np.ndarray:
    if system.discrete:
        return np.asarray(system.step_map(P), dtype=float)  # type: ignore[misc]
    return flow_ensemble(system, P, 1.0, tol)


def _refine(
    system: FlowSystem,
    pre: np.ndarray,
    img: np.ndarray,
    simplices: np.ndarray,
    limit: float,
    max_vertices: int,
    tol: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, bool]:
    """Longest-edge bisection of image simplices whose longest edge exceeds ``limit``.

    Midpoints are taken in the preimage and mapped forward, so new vertices
    lie on the true image disk. Hanging nodes are allowed.
    """
    k = simplices.shape[1] - 1
    pairs = [(0, 1)] if k == 1 else [(0, 1), (1, 2), (2, 0)]
    while True:
        v = img[simplices]
        lengths = np.stack([np.linalg.norm(v[:, a] - v[:, b], axis=1) for a, b in pairs], axis=1)
        longest = np.argmax(lengths, axis=1)
        split = np.flatnonzero(lengths[np.arange(len(simplices)), longest] > limit)
        if len(split) == 0:
            return pre, img, simplices, False
        midpoint: dict[tuple[int, int], int] = {}
        new_pre: list[np.ndarray] = []
        for s in split:
            a, b = pairs[longest[s]]
            key = tuple(sorted((int(simplices[s, a]), int(simplices[s, b]))))
            if key not in midpoint:
                midpoint[key] = len(pre) + len(new_pre)
                new_pre.append(0.5 * (pre[key[0]] + pre[key[1]]))
        if len(pre) + len(new_pre) > max_vertices:
            logger.warning("mesh refinement saturated at %d vertices", len(pre))
            return pre, img, simplices, True
        P_new = np.asarray(new_pre)
        pre = np.concatenate([pre, P_new])
        img = np.concatenate([img, _map_points(system, P_new, tol)])
        keep = np.ones(len(simplices), dtype=bool)
        keep[split] = False
        children = []
        for s in split:
            a, b = pairs[longest[s]]
            sa, sb = int(simplices[s, a]), int(simplices[s, b])
            m = midpoint[tuple(sorted((sa, sb)))]
            if k == 1:
                children.extend([(sa, m), (m, sb)])
            else:
                c = int(simplices[s, 3 - a - b])
                children.extend([(sa, m, c), (m, sb, c)])
        simplices = np.concatenate([simplices[keep], np.asarray(children, dtype=np.int64)])


def _max_ball_volume(mesh: DiskMesh, radius: float, centers: np.ndarray) -> float:
    vol = mesh.volumes()
    centroids = mesh.vertices[mesh.simplices].mean(axis=1)
    tree = cKDTree(centroids)
    best = 0.0
    for hits in tree.query_ball_point(centers, radius):
        if hits:
            best = max(best, float(np.sum(vol[hits])))
    return best


def disk_volume_expansion(
    system: FlowSystem,
    mesh: DiskMesh,
    n_steps: int,
    tol: float = DEFAULT_TOL,
    *,
    target_edge: Optional[float] = None,
    max_vertices: int = 10**6,
    ball_radius: float = 0.5,
    ball_centers: int = 64,
    aperture: Optional[float] = None,
    rng: Optional[np.random.Generator] = None,
) -> VolumeExpansion:
    """Slope of log Leb(f^n D) against n, with refinement and ball-clipped volumes."""
    if n_steps < 2:
        raise ValueError(f"n_steps must be >= 2, got {n_steps}")
    if aperture is not None and mesh.tangent_angle is not None and mesh.tangent_angle > math.atan(aperture):
        raise ValueError(
            f"mesh tilts {mesh.tangent_angle:.3g} rad from F, outside the cone of aperture {aperture:g}"
        )
    rng = rng if rng is not None else np.random.default_rng(0)
    limit = 2.0 * (target_edge if target_edge is not None else float(np.mean(mesh.edge_lengths())))
    cur = DiskMesh(vertices=mesh.vertices.copy(), simplices=mesh.simplices.copy())
    log_vol = [math.log(cur.total_volume())]
    ball = [_max_ball_volume(cur, ball_radius, cur.vertices[rng.choice(len(cur.vertices), min(ball_centers, len(cur.vertices)), replace=False)])]
    worst_aspect = float(np.max(cur.aspect_ratios()))
    saturated = False
    steps = 0
    for step in range(1, n_steps + 1):
        img = _map_points(system, cur.vertices, tol)
        if not saturated:
            _, img, simp, saturated = _refine(system, cur.vertices, img, cur.simplices, limit, max_vertices, tol)
        else:
            simp = cur.simplices
        nxt = DiskMesh(vertices=img, simplices=simp)
        aspect = float(np.max(nxt.aspect_ratios()))
        if not np.isfinite(aspect) or aspect > COLLAPSE_ASPECT:
            raise MeshRefinementError(
                f"mesh quality collapsed at step {step} (aspect ratio {aspect:.3g})", last_valid_step=step - 1
            )
        worst_aspect = max(worst_aspect, aspect)
        cur = nxt
        steps = step
        log_vol.append(math.log(cur.total_volume()))
        pick = rng.choice(len(cur.vertices), min(ball_centers, len(cur.vertices)), replace=False)
        ball.append(_max_ball_volume(cur, ball_radius, cur.vertices[pick]))
    ns = np.arange(len(log_vol), dtype=float)
    v_F = float(np.polyfit(ns, log_vol, 1)[0])
    tail = slice(len(ball) // 2, None)
    ball_slope = float(np.polyfit(ns[tail], np.log(np.maximum(ball[tail], 1e-300)), 1)[0]) if len(ns[tail]) >= 2 else 0.0
    logger.info("disk volume growth v_F=%.4f over %d steps (%d vertices)", v_F, steps, len(cur.vertices))
    return VolumeExpansion(
        v_F=v_F,
        log_volumes=log_vol,
        max_ball_volumes=ball,
        ball_slope=ball_slope,
        worst_aspect=worst_aspect,
        vertex_count=len(cur.vertices),
        saturated=saturated,
        steps_completed=steps,
    )


# ----- Expansiveness -----


def _segment_distance(P: np.ndarray, arc: np.ndarray) -> np.ndarray:
    """Distance from each row of P to the polyline through ``arc``."""
    best = np.full(len(P), np.inf)
    for a, b in zip(arc[:-1], arc[1:]):
        ab = b - a
        denom = float(ab @ ab)
        t = np.zeros(len(P)) if denom == 0 else np.clip((P - a) @ ab / denom, 0.0, 1.0)
        best = np.minimum(best, np.linalg.norm(P - (a + t[:, None] * ab), axis=1))
    return best


def expansiveness_probe(
    system: FlowSystem,
    x: Any,
    delta: float,
    n_max: int,
    eps_inner: float,
    tol: float = DEFAULT_TOL,
    *,
    samples: int = 2000,
    arc_points: int = 21,
    n_grid: Optional[Sequence[int]] = None,
    rng: Optional[np.random.Generator] = None,
    threads: int = 1,
) -> ExpansivenessProbe:
    """Sample B_n(x, δ), count it at scale eps_inner and measure its collapse onto the orbit."""
    if delta <= 0 or eps_inner <= 0 or n_max < 2:
        raise ValueError("need delta > 0, eps_inner > 0 and n_max >= 2")
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(x, dtype=float)
    dirs = rng.standard_normal((samples, system.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = delta * rng.random(samples) ** (1.0 / system.dim)
    ball = x + radii[:, None] * dirs
    if system.period is not None:
        ball = np.mod(ball, system.period)
    if system.discrete:
        arc = x[None, :]
    else:
        speed = float(np.linalg.norm(evaluate(system, x)))
        s_max = delta / (2.0 * max(speed, 1e-12))
        s = np.linspace(-s_max, s_max, arc_points)
        back = [flow(system, x, t, tol) for t in s[s < 0]]
        fwd = [flow(system, x, t, tol) for t in s[s >= 0]]
        arc = np.asarray(back + fwd)
    pool = np.concatenate([x[None, :], arc, ball])
    first_random = 1 + len(arc)
    traj, _ = iterate_ensemble(system, pool, n_max, tol, threads=threads)
    d = system.metric(traj, traj[0][None, :, :])
    d = np.where(np.isfinite(d), d, np.inf)
    alive = np.cumprod(d <= delta, axis=1).astype(bool)  # alive[:, j]: inside for iterates 0..j
    grid = list(n_grid) if n_grid is not None else sorted(set(np.linspace(1, n_max, min(n_max, 12)).round().astype(int)))
    order = seeded_order(len(pool), rng)
    survivors, counts, fractions = [], [], []
    for n in grid:
        keep = np.flatnonzero(alive[:, n - 1])
        survivors.append(len(keep))
        fractions.append(float(np.mean(alive[first_random:, n - 1])))
        sub_order = [i for i in order if alive[i, n - 1]]
        counts.append(len(greedy_cover(system, traj[:, :n], eps_inner, sub_order)))
    ns = np.asarray(grid, dtype=float)
    slope = float(np.polyfit(ns, np.log(counts), 1)[0]) if len(grid) >= 2 else 0.0
    frac = np.asarray(fractions)
    good = frac > 0
    escape = float(-np.polyfit(ns[good], np.log(frac[good]), 1)[0]) if np.sum(good) >= 2 else float("nan")
    final = np.flatnonzero(alive[:, -1])
    if system.discrete:
        collapse = float(np.max(system.metric(pool[final], x[None, :]))) if len(final) else 0.0
    else:
        collapse = float(np.max(_segment_distance(pool[final], arc))) if len(final) else 0.0
    low_conf = bool(np.sum(alive[first_random:, -1]) <= 1)
    if low_conf:
        logger.warning("expansiveness probe at %s: at most one random sample survived", x.tolist())
        slope = 0.0 if survivors[-1] <= 1 else slope
    return ExpansivenessProbe(
        slope=slope,
        collapse=collapse,
        survivors=survivors,
        counts=counts,
        n_grid=[int(n) for n in grid],
        survival_fraction=fractions,
        escape_rate=escape,
        low_confidence=low_conf,
        delta=delta,
        eps_inner=eps_inner,
    )
