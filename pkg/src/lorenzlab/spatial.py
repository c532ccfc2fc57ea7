"""
Spatial hashing for radius queries in R^d (optionally on a torus).

Cells are hypercubes of side ``cell_size``; a query of radius r visits every
cell within ``ceil(r / cell_size)`` steps along each axis.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from typing import Iterable, Optional

import numpy as np


class SpatialHash:
    def __init__(self, cell_size: float, dim: int, period: Optional[float] = None) -> None:
        if cell_size <= 0:
            raise ValueError(f"cell_size must be positive, got {cell_size}")
        self.dim = dim
        self.period = period
        self.n_wrap: Optional[int] = None
        if period is not None:
            # cells must tile the circle exactly
            self.n_wrap = max(1, int(period // cell_size))
            cell_size = period / self.n_wrap
        self.cell_size = cell_size
        self.inv_cell = 1.0 / cell_size
        self.cells: dict[tuple[int, ...], list[int]] = defaultdict(list)
        self._offsets: dict[int, list[tuple[int, ...]]] = {}

    def __len__(self) -> int:
        return sum(len(v) for v in self.cells.values())

    def key(self, p: np.ndarray) -> tuple[int, ...]:
        idx = np.floor(np.asarray(p, dtype=float) * self.inv_cell).astype(np.int64)
        if self.n_wrap is not None:
            idx = np.mod(idx, self.n_wrap)
        return tuple(int(i) for i in idx)

    def insert(self, index: int, p: np.ndarray) -> None:
        self.cells[self.key(p)].append(index)

    def extend(self, indices: Iterable[int], points: np.ndarray) -> None:
        for i, p in zip(indices, points):
            self.insert(int(i), p)

    def _neighbour_offsets(self, reach: int) -> list[tuple[int, ...]]:
        if reach not in self._offsets:
            span = range(-reach, reach + 1)
            self._offsets[reach] = list(itertools.product(span, repeat=self.dim))
        return self._offsets[reach]

    def candidates(self, p: np.ndarray, radius: float) -> list[int]:
        """Indices in every cell that can hold a point within ``radius`` of ``p``."""
        reach = max(1, int(math.ceil(radius * self.inv_cell)))
        base = self.key(p)
        seen: set[tuple[int, ...]] = set()
        found: list[int] = []
        for off in self._neighbour_offsets(reach):
            cell = tuple(b + o for b, o in zip(base, off))
            if self.n_wrap is not None:
                cell = tuple(c % self.n_wrap for c in cell)
            if cell in seen:
                continue
            seen.add(cell)
            bucket = self.cells.get(cell)
            if bucket:
                found.extend(bucket)
        return found
