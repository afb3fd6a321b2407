"""Uniform lattices, spatial slices with analytic exterior data, and trajectories."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

ALIGN_TOL = 1e-9


@dataclass(frozen=True)
class Grid:
    """Uniform lattice over the centered box [-m*h, m*h]^n with nodes at integer
    multiples of h.  n is 1 or 2."""

    n: int
    h: float
    m: int

    def __post_init__(self):
        if self.n not in (1, 2):
            raise ValueError("only n=1 and n=2 are supported")
        if self.h <= 0 or self.m < 1:
            raise ValueError("need h > 0 and m >= 1")

    @property
    def radius(self) -> float:
        return self.m * self.h

    @property
    def shape(self) -> tuple:
        return (2 * self.m + 1,) * self.n

    @property
    def size(self) -> int:
        return (2 * self.m + 1) ** self.n

    def axis(self) -> np.ndarray:
        return self.h * np.arange(-self.m, self.m + 1)

    def points(self) -> np.ndarray:
        """Node coordinates, shape grid.shape + (n,)."""
        ax = self.axis()
        if self.n == 1:
            return ax[:, None]
        X, Y = np.meshgrid(ax, ax, indexing="ij")
        return np.stack([X, Y], axis=-1)

    def extended_points(self, pad: int) -> np.ndarray:
        ax = self.h * np.arange(-self.m - pad, self.m + pad + 1)
        if self.n == 1:
            return ax[:, None]
        X, Y = np.meshgrid(ax, ax, indexing="ij")
        return np.stack([X, Y], axis=-1)

    def index_of(self, x) -> tuple:
        """Multi-index of a lattice-aligned point; raises if x is off-lattice."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        idx = np.rint(x / self.h).astype(int)
        if np.max(np.abs(x - idx * self.h)) > ALIGN_TOL * max(1.0, self.radius):
            raise ValueError(f"point {x} is not on the lattice (h={self.h})")
        if np.max(np.abs(idx)) > self.m:
            raise ValueError(f"point {x} lies outside the grid box")
        return tuple(idx + self.m)

    def ball_mask(self, r: float, center=None) -> np.ndarray:
        pts = self.points()
        if center is not None:
            pts = pts - np.asarray(center, dtype=float)
        return np.sqrt((pts ** 2).sum(axis=-1)) < r

    def box_mask(self, half_side: float, center=None) -> np.ndarray:
        """Open cube {max_i |x_i - c_i| < half_side}."""
        pts = self.points()
        if center is not None:
            pts = pts - np.asarray(center, dtype=float)
        return np.abs(pts).max(axis=-1) < half_side


def constant_exterior(c: float) -> Callable:
    def g(pts):
        pts = np.asarray(pts, dtype=float)
        return np.full(pts.shape[:-1], float(c))

    return g


def zero_exterior() -> Callable:
    return constant_exterior(0.0)


def radial_exterior(fn: Callable) -> Callable:
    """Lift a radial profile r -> value to a callable on point arrays."""

    def g(pts):
        pts = np.asarray(pts, dtype=float)
        return fn(np.sqrt((pts ** 2).sum(axis=-1)))

    return g


@dataclass
class SpatialSlice:
    """Grid values of u(., t) plus an analytic extension outside the grid box.

    The exterior callable takes point arrays of shape (..., n) and must be
    defined on all of R^n (it is only consulted beyond the box).
    """

    grid: Grid
    values: np.ndarray
    exterior: Callable
    t: float = 0.0
    _ext_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ValueError("values shape does not match grid")

    def extended(self, pad: int) -> np.ndarray:
        """Values on the lattice padded by `pad` cells per side, exterior-filled."""
        cached = self._ext_cache.get(pad)
        if cached is not None:
            return cached
        ext = np.asarray(self.exterior(self.grid.extended_points(pad)), dtype=float)
        core = (slice(pad, pad + 2 * self.grid.m + 1),) * self.grid.n
        ext[core] = self.values
        self._ext_cache[pad] = ext
        return ext

    def value_at(self, x) -> float:
        """Value at a single point: grid lookup inside the box (lattice-aligned
        only), exterior callable outside."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if np.max(np.abs(x)) > self.grid.radius + ALIGN_TOL:
            return float(np.asarray(self.exterior(x[None, :])).ravel()[0])
        return float(self.values[self.grid.index_of(x)])

    def sup_abs(self) -> float:
        return float(np.max(np.abs(self.values)))


def second_difference(u: SpatialSlice, x, y) -> float:
    """Symmetric second difference (u(x+y) + u(x-y) - 2 u(x)) / 2.

    x must be a grid node; x +- y must be lattice-aligned or fall beyond the
    box where the exterior callable takes over.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return 0.5 * (u.value_at(x + y) + u.value_at(x - y)) - u.value_at(x)


@dataclass
class Trajectory:
    """Time-ordered stack of slices on a fixed grid with uniform time step."""

    grid: Grid
    t0: float
    dt: float
    values: np.ndarray  # shape (T,) + grid.shape
    exterior_t: Callable  # g(points, t)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[1:] != self.grid.shape:
            raise ValueError("trajectory values do not match grid shape")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self))

    def slice_at(self, k: int) -> SpatialSlice:
        t = self.t0 + self.dt * k
        g = self.exterior_t
        return SpatialSlice(self.grid, self.values[k], lambda pts, _t=t: g(pts, _t), t=t)

    def time_index(self, t: float) -> int:
        k = int(round((t - self.t0) / self.dt))
        if not (0 <= k < len(self)):
            raise ValueError(f"time {t} outside trajectory range")
        return k

    def window(self, t_from: float, t_to: float) -> np.ndarray:
        """Indices k with t_from - tol <= t_k <= t_to + tol."""
        tol = 1e-9 * max(1.0, abs(self.dt)) + 0.5 * self.dt * 1e-6
        ts = self.times
        return np.nonzero((ts >= t_from - tol) & (ts <= t_to + tol))[0]
