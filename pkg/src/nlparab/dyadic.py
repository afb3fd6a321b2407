"""Anisotropic space-time dyadic boxes and the covering lemmas on indicator grids.

A box at generation g has spatial side 2^-g and time length (2^-g)^sigma * tau
with shape parameter tau in [1, 8].  Spatial subdivision is always into 2^n
congruent cubes; the time interval splits into s in {1, 2, 4} congruent pieces
according to tau (no split below 2, two pieces up to 4, four pieces above), so
tau' = 2^sigma tau / s stays in [1, 8].

Because every box at a given generation shares the same tau, a box is stored
as integer coordinates (generation, spatial index, time slot); all measures
are exact cell counts on an aligned indicator grid of shape (2^G,)^n x N_G,
where N_G is the product of the time splits (time lengths are then exact
rationals 1/N_g, so no float drift accumulates across generations).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def time_split(tau: float) -> int:
    if tau < 2.0:
        return 1
    if tau < 4.0:
        return 2
    return 4


@dataclass(frozen=True)
class GenerationSchedule:
    """tau, split factor and time-slot count for generations 0..G."""

    sigma: float
    taus: tuple
    splits: tuple
    slots: tuple   # N_g; N_{g+1} = N_g * s_g

    @classmethod
    def build(cls, sigma: float, generations: int) -> "GenerationSchedule":
        taus, splits, slots = [1.0], [], [1]
        for g in range(generations):
            s = time_split(taus[-1])
            splits.append(s)
            slots.append(slots[-1] * s)
            taus.append(2.0 ** sigma * taus[-1] / s)
        return cls(sigma=sigma, taus=tuple(taus), splits=tuple(splits), slots=tuple(slots))

    @property
    def depth(self) -> int:
        return len(self.splits)


@dataclass(frozen=True)
class DyadicBox:
    """Box Q_r(x0) x [t0, t0 + r^sigma tau] in integer coordinates."""

    schedule: GenerationSchedule
    generation: int
    ix: tuple      # spatial index per axis, in [0, 2^g)
    it: int        # time slot, in [0, N_g)

    @property
    def n(self) -> int:
        return len(self.ix)

    @property
    def r(self) -> float:
        return 2.0 ** (-self.generation)

    @property
    def tau(self) -> float:
        return self.schedule.taus[self.generation]

    @property
    def time_len(self) -> float:
        return 1.0 / self.schedule.slots[self.generation]

    @property
    def t0(self) -> float:
        return self.it * self.time_len

    @property
    def center(self) -> tuple:
        return tuple((i + 0.5) * self.r for i in self.ix)

    @property
    def parent(self) -> "DyadicBox | None":
        if self.generation == 0:
            return None
        s = self.schedule.splits[self.generation - 1]
        return DyadicBox(self.schedule, self.generation - 1,
                         tuple(i // 2 for i in self.ix), self.it // s)

    def key(self):
        return (self.generation, self.ix, self.it)

    def contains(self, other: "DyadicBox") -> bool:
        """True if other's cells are inside self (ancestor in the laminar tree)."""
        dg = other.generation - self.generation
        if dg < 0:
            return False
        if any(oi >> dg != si for oi, si in zip(other.ix, self.ix)):
            return False
        ratio = self.schedule.slots[other.generation] // self.schedule.slots[self.generation]
        return other.it // ratio == self.it


def subdivide(box: DyadicBox) -> list:
    """2^n spatial children crossed with the tau-determined time children."""
    g = box.generation
    if g + 1 > box.schedule.depth:
        raise ValueError("schedule not deep enough to subdivide this box")
    s = box.schedule.splits[g]
    children = []
    for corner in np.ndindex(*(2,) * box.n):
        ix = tuple(2 * i + c for i, c in zip(box.ix, corner))
        for k in range(s):
            children.append(DyadicBox(box.schedule, g + 1, ix, box.it * s + k))
    return children


class IndicatorGrid:
    """Boolean indicator on the aligned grid (2^G,)^n x N_G with O(1) box sums."""

    def __init__(self, A: np.ndarray, schedule: GenerationSchedule):
        self.schedule = schedule
        G = schedule.depth
        n = A.ndim - 1
        if A.shape != (2 ** G,) * n + (schedule.slots[G],):
            raise ValueError(f"indicator shape {A.shape} does not match the schedule "
                             f"(expected {(2**G,)*n + (schedule.slots[G],)})")
        self.A = A.astype(bool)
        self.n = n
        self.G = G
        S = A.astype(np.int64)
        for ax in range(A.ndim):
            S = S.cumsum(axis=ax)
        self.prefix = np.pad(S, [(1, 0)] * A.ndim)
        self.total_cells = A.size

    def cells_of(self, box: DyadicBox):
        side = 2 ** (self.G - box.generation)
        tlen = self.schedule.slots[self.G] // self.schedule.slots[box.generation]
        lo = tuple(i * side for i in box.ix) + (box.it * tlen,)
        hi = tuple((i + 1) * side for i in box.ix) + ((box.it + 1) * tlen,)
        return lo, hi

    def box_cells(self, box: DyadicBox) -> int:
        side = 2 ** (self.G - box.generation)
        tlen = self.schedule.slots[self.G] // self.schedule.slots[box.generation]
        return side ** self.n * tlen

    def count(self, box: DyadicBox) -> int:
        lo, hi = self.cells_of(box)
        p = self.prefix
        d = self.n + 1
        total = 0
        for corner in np.ndindex(*(2,) * d):
            idx = tuple(hi[a] if corner[a] else lo[a] for a in range(d))
            total += (-1) ** (d - sum(corner)) * int(p[idx])
        return total


@dataclass
class CZCover:
    """Selected boxes with fraction > mu1 whose predecessors have fraction <= mu1."""

    selected: list
    mu1: float
    grid: IndicatorGrid
    floor_hits: int = 0     # grid-scale boxes that could not be subdivided further

    @property
    def predecessors(self) -> list:
        seen, preds = set(), []
        for b in self.selected:
            p = b.parent
            if p is not None and p.key() not in seen:
                seen.add(p.key())
                preds.append(p)
        return preds


def cz_cover(A: np.ndarray, mu1: float, schedule: GenerationSchedule | None = None) -> CZCover:
    """Dyadic covering of an indicator set per the two covering properties:
    selected boxes capture a fraction > mu1 of themselves, their predecessors
    capture at most mu1, and the selection covers the set exactly at grid
    resolution (recursion stops at single cells, whose fraction is 0 or 1)."""
    A = np.asarray(A)
    n = A.ndim - 1
    if schedule is None:
        G = int(np.round(np.log2(A.shape[0])))
        raise ValueError("a GenerationSchedule is required (time resolution is sigma-dependent)")
    grid = IndicatorGrid(A, schedule)
    root = DyadicBox(schedule, 0, (0,) * n, 0)
    total = grid.count(root)
    if total > mu1 * grid.box_cells(root):
        raise ValueError(f"|A| = {total} cells exceeds mu1 * |Q_1 x [0,1]|; "
                         "the covering lemma does not apply")
    selected = []
    floor_hits = 0
    stack = [root]
    while stack:
        box = stack.pop()
        if box.generation >= schedule.depth:
            floor_hits += 1
            continue
        for child in subdivide(box):
            cnt = grid.count(child)
            if cnt == 0:
                continue
            if cnt > mu1 * grid.box_cells(child):
                selected.append(child)
            else:
                stack.append(child)
    return CZCover(selected=selected, mu1=mu1, grid=grid, floor_hits=floor_hits)


def verify_cz_properties(cover: CZCover) -> dict:
    """Exact grid-resolution check of the covering properties."""
    grid, mu1 = cover.grid, cover.mu1
    ok_sel = all(grid.count(b) > mu1 * grid.box_cells(b) for b in cover.selected)
    ok_pred = all(grid.count(p) <= mu1 * grid.box_cells(p) for p in cover.predecessors)
    canvas = np.zeros(grid.A.shape, dtype=bool)
    for b in cover.selected:
        lo, hi = grid.cells_of(b)
        canvas[tuple(slice(l, h) for l, h in zip(lo, hi))] = True
    uncovered = int(np.count_nonzero(grid.A & ~canvas))
    disjoint = int(canvas.sum()) == sum(grid.box_cells(b) for b in cover.selected)
    return {"selected_fraction": ok_sel, "predecessor_fraction": ok_pred,
            "covers_A_exactly": uncovered == 0, "uncovered_cells": uncovered,
            "disjoint": disjoint}


@dataclass
class Stack:
    """Forward-in-time extension K^m = Q x [t0 + len, t0 + (m+1) len]."""

    base: DyadicBox
    m: int

    def time_cells(self, grid: IndicatorGrid):
        tlen = grid.schedule.slots[grid.G] // grid.schedule.slots[self.base.generation]
        lo = (self.base.it + 1) * tlen
        return lo, lo + self.m * tlen


def thin_predecessors(preds: Sequence[DyadicBox]) -> list:
    """Greedy disjoint subfamily: keep large-generation-first ancestors and
    drop boxes contained in a kept one (dyadic boxes are laminar, so the kept
    family is pairwise disjoint and has the same union)."""
    kept = []
    for b in sorted(preds, key=lambda b: b.generation):
        if not any(k.contains(b) for k in kept):
            kept.append(b)
    return kept


def stack_union_bound(cover: CZCover, m: int) -> dict:
    """Both sides of |A| <= (m+1) mu1 / m * |union of stacked predecessors|,
    computed as exact cell counts (the stacks live on a time-extended canvas)."""
    if m < 1:
        raise ValueError("stack multiplier m must be >= 1")
    grid = cover.grid
    kept = thin_predecessors(cover.predecessors)
    # kept union must still cover A in measure (exactly, at grid resolution)
    canvas = np.zeros(grid.A.shape, dtype=bool)
    for b in kept:
        lo, hi = grid.cells_of(b)
        canvas[tuple(slice(l, h) for l, h in zip(lo, hi))] = True
    if int(np.count_nonzero(grid.A & ~canvas)):
        raise AssertionError("thinned predecessors fail to cover the set")
    # rasterize the stacks on a canvas extended forward in time
    T = grid.A.shape[-1]
    ext = np.zeros(grid.A.shape[:-1] + (T * (m + 2),), dtype=bool)
    for b in kept:
        lo, hi = grid.cells_of(b)
        s = Stack(b, m)
        tlo, thi = s.time_cells(grid)
        ext[tuple(slice(l, h) for l, h in zip(lo[:-1], hi[:-1])) + (slice(tlo, thi),)] = True
    a_cells = int(grid.A.sum())
    union_cells = int(ext.sum())
    bound = (m + 1) * cover.mu1 / m * union_cells
    return {
        "A_cells": a_cells,
        "stack_union_cells": union_cells,
        "bound_cells": bound,
        "holds": a_cells <= bound + 1e-9 * max(1.0, bound),
        "kept_predecessors": len(kept),
    }


def boxes_to_json(boxes: Sequence[DyadicBox]) -> list:
    """Export (id, parent, center, r, t0, tau, generation) for visualization."""
    keys = {b.key(): i for i, b in enumerate(boxes)}
    out = []
    for i, b in enumerate(boxes):
        par = b.parent
        out.append({
            "id": i,
            "parent": keys.get(par.key()) if par is not None else None,
            "center": list(b.center),
            "r": b.r,
            "t0": b.t0,
            "tau": b.tau,
            "generation": b.generation,
        })
    return out
