"""Parabolic convex envelope, Legendre transform, contact coverings and the
weak ABP inequality as executable diagnostics on trajectories.

Conventions: trajectories are normalized so that u >= 0 outside B_1 and
sup of u^- over B_1 x (-1,0] equals 1.  The envelope Gamma(., t) is the
per-slice lower convex hull over B_3 of min(ubar, 0) on B_1 extended by 0 on
B_3 minus B_1, where ubar is the running minimum of u from t = -1.  The
Legendre value h(p,t) is the largest intercept of a slope-p plane through the
anchor that stays below ubar on B_1 and below 0 on B_3.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .grids import Grid, Trajectory


def default_contact_tol(grid: Grid) -> float:
    # exact equality u = Gamma never holds on grids
    return max(1e-8, grid.h ** 2)


@dataclass
class MonotoneEnvelope:
    """Running minimum of u(x, .) over [-1, t], one array per slice."""

    times: np.ndarray
    values: np.ndarray


@dataclass
class ParabolicConvexEnvelope:
    grid: Grid
    times: np.ndarray
    values: np.ndarray          # (T,) + shape; 0 outside B3
    b3: np.ndarray              # hull domain mask
    b1: np.ndarray              # closed unit ball mask
    anchor_idx: tuple           # node index of the normalization point
    anchor: np.ndarray          # x0 coordinates
    anchor_k: int               # slice index of the minimum
    sub_lo: np.ndarray          # (T,) + shape (+ (n,) in 2D): subgradient data
    sub_hi: np.ndarray

    def contact_mask(self, u_values: np.ndarray, tol: float) -> np.ndarray:
        """Discrete contact set {u - Gamma <= tol} restricted to closed B_1."""
        return (u_values - self.values <= tol) & self.b1[None, ...]


@dataclass
class LegendreTable:
    """Sampled h(p,t) on a slope lattice with the domain mask of dGamma(B_1,t)."""

    p_lattice: np.ndarray       # (P, n)
    times: np.ndarray
    values: np.ndarray          # (T, P)
    domain: np.ndarray          # (T, P) bool: the ubar-constraint binds
    anchor: np.ndarray

    def index_of_p(self, p) -> int:
        d = np.abs(self.p_lattice - np.atleast_1d(np.asarray(p, dtype=float))).max(axis=1)
        return int(np.argmin(d))


def lower_hull_1d(x: np.ndarray, w: np.ndarray):
    """Lower convex hull values and per-node subgradient intervals."""
    n = len(x)
    idx = []
    for i in range(n):
        while len(idx) >= 2:
            i0, i1 = idx[-2], idx[-1]
            # keep the chain convex: pop i1 if it lies above chord (i0, i)
            if (w[i] - w[i0]) * (x[i1] - x[i0]) <= (w[i1] - w[i0]) * (x[i] - x[i0]):
                idx.pop()
            else:
                break
        idx.append(i)
    hull = np.empty(n)
    lo = np.empty(n)
    hi = np.empty(n)
    slopes = [(w[idx[j + 1]] - w[idx[j]]) / (x[idx[j + 1]] - x[idx[j]]) for j in range(len(idx) - 1)]
    seg = 0
    for i in range(n):
        while seg + 1 < len(idx) and x[i] > x[idx[seg + 1]]:
            seg += 1
        if i == idx[seg]:
            hull[i] = w[i]
            lo[i] = slopes[seg - 1] if seg >= 1 and i > idx[0] else -np.inf
            hi[i] = slopes[seg] if seg < len(slopes) else np.inf
            if i == idx[0]:
                lo[i] = -np.inf
            if i == idx[-1]:
                hi[i] = np.inf
        else:
            s = slopes[seg] if seg < len(slopes) else 0.0
            hull[i] = w[idx[seg]] + s * (x[i] - x[idx[seg]])
            lo[i] = hi[i] = s
    return hull, lo, hi


def _lower_hull_2d(pts: np.ndarray, w: np.ndarray):
    """Lower convex hull via qhull; returns hull values and facet gradients."""
    from scipy.spatial import ConvexHull

    if np.ptp(w) < 1e-13:
        base = np.full(len(w), w.min())
        grads = np.zeros((len(w), 2))
        return base, grads
    lifted = np.column_stack([pts, w])
    hull = ConvexHull(lifted, qhull_options="QJ1e-11")
    eqs = hull.equations  # a.x + b.y + c.w + d = 0, outward normals
    lower = eqs[eqs[:, 2] < -1e-12]
    # each lower facet defines w = -(a x + b y + d)/c; hull value = max of planes
    A = -lower[:, :2] / lower[:, 2:3]
    D = -lower[:, 3] / lower[:, 2]
    planes = pts @ A.T + D[None, :]
    best = np.argmax(planes, axis=1)
    vals = planes[np.arange(len(pts)), best]
    vals = np.minimum(vals, w)  # guard against joggle overshoot at vertices
    grads = A[best]
    return vals, grads


def build_envelope(traj: Trajectory, t_from: float = -1.0, p_max: float = 0.5,
                   contact_tol: float | None = None):
    """Monotone envelope, per-slice convex envelope and the Legendre table.

    The trajectory must be normalized: u >= 0 outside B_1 (sampled) and
    sup of u^- over B_1 x (t_from, 0] equal to 1 up to tolerance.
    """
    grid = traj.grid
    if grid.radius < 3.0 - 1e-9:
        raise ValueError("envelope needs the grid box to contain B_3")
    ks = traj.window(t_from, 0.0)
    times = traj.times[ks]
    U = traj.values[ks]
    pts = grid.points()
    b3 = grid.ball_mask(3.0 + 1e-12)
    b1 = np.sqrt((pts ** 2).sum(axis=-1)) <= 1.0 + 1e-12

    _check_normalization(U, b1, grid)

    ubar = np.minimum.accumulate(U, axis=0)
    mono = MonotoneEnvelope(times=times, values=ubar)

    kmin, flat = min(
        ((k, int(np.argmin(np.where(b1, U[k], np.inf)))) for k in range(len(U))),
        key=lambda kf: U[kf[0]].reshape(-1)[kf[1]],
    )
    anchor_idx = np.unravel_index(flat, grid.shape)
    x0 = pts[anchor_idx]

    W = np.where(b1[None, ...], np.minimum(ubar, 0.0), 0.0)
    T = len(times)
    gamma = np.zeros_like(U)
    if grid.n == 1:
        xs = pts[..., 0][b3]
        sub_lo = np.zeros_like(U)
        sub_hi = np.zeros_like(U)
        for k in range(T):
            hull, lo, hi = lower_hull_1d(xs, W[k][b3])
            gamma[k][b3] = hull
            sub_lo[k][b3] = lo
            sub_hi[k][b3] = hi
    else:
        p3 = pts[b3]
        sub_lo = np.zeros(U.shape + (2,))
        sub_hi = np.zeros(U.shape + (2,))
        for k in range(T):
            vals, grads = _lower_hull_2d(p3, W[k][b3])
            gamma[k][b3] = vals
            sub_lo[k][b3] = grads
            sub_hi[k][b3] = grads

    env = ParabolicConvexEnvelope(grid=grid, times=times, values=gamma, b3=b3, b1=b1,
                                  anchor_idx=anchor_idx, anchor=np.atleast_1d(x0),
                                  anchor_k=kmin, sub_lo=sub_lo, sub_hi=sub_hi)

    table = _legendre_table(grid, times, ubar, b1, b3, np.atleast_1d(x0), p_max)
    return mono, env, table


def _check_normalization(U, b1, grid):
    neg = np.where(b1[None, ...], U, np.inf)
    s = -float(np.min(neg))
    if not (0.8 <= s <= 1.2):
        raise ValueError(f"trajectory not normalized: sup u^- over B_1 is {s:.4g}, expected ~1 "
                         "(rescale first)")
    outside = np.where(b1[None, ...], np.inf, U)
    if float(np.min(outside)) < -1e-8:
        raise ValueError("normalization violated: u < 0 at grid nodes outside B_1")


def _legendre_table(grid, times, ubar, b1, b3, x0, p_max):
    if grid.n == 1:
        P = int(np.floor(p_max / grid.h))
        plat = (grid.h * np.arange(-P, P + 1))[:, None]
    else:
        P = int(np.floor(p_max / grid.h))
        ax = grid.h * np.arange(-P, P + 1)
        PX, PY = np.meshgrid(ax, ax, indexing="ij")
        plat = np.stack([PX.ravel(), PY.ravel()], axis=-1)
    pts = grid.points()
    X1 = (pts[b1] - x0).reshape(-1, grid.n)
    X3 = (pts[b3] - x0).reshape(-1, grid.n)
    dots1 = plat @ X1.T      # (P, N1)
    term2 = (-(plat @ X3.T)).min(axis=1)   # (P,)
    T = len(times)
    vals = np.empty((T, len(plat)))
    dom = np.empty((T, len(plat)), dtype=bool)
    for k in range(T):
        u1 = ubar[k][b1].reshape(-1)
        term1 = (u1[None, :] - dots1).min(axis=1)
        vals[k] = np.minimum(term1, term2)
        dom[k] = term1 <= term2 + 1e-12
    return LegendreTable(p_lattice=plat, times=times, values=vals, domain=dom, anchor=x0)


def snap_subgradient(env: ParabolicConvexEnvelope, table: LegendreTable, k: int, idx) -> int:
    """Index of the lattice slope nearest to the subdifferential at a node."""
    if env.grid.n == 1:
        lo, hi = env.sub_lo[k][idx], env.sub_hi[k][idx]
        lo = max(lo, float(table.p_lattice.min()))
        hi = min(hi, float(table.p_lattice.max()))
        target = 0.5 * (lo + hi) if lo <= hi else lo
        return table.index_of_p([target])
    return table.index_of_p(env.sub_lo[k][idx])


# -- Lemma-level checks -------------------------------------------------------


@dataclass
class DeltaHReport:
    domain_monotone: bool
    h_nonincreasing: bool
    min_margin: float
    violations: list
    checked: int

    @property
    def ok(self) -> bool:
        return self.domain_monotone and self.h_nonincreasing and not self.violations


def delta_h_check(env: ParabolicConvexEnvelope, table: LegendreTable, u_values: np.ndarray,
                  f_sup: Callable, slack: float, contact_tol: float | None = None,
                  stride: int = 1, max_points: int = 4000) -> DeltaHReport:
    """Monotonicity of the Legendre data plus the contact-set Lipschitz bound
    Delta h >= -2 ||f||_window Delta t - slack at every snapped contact triple.

    f_sup(t_lo, t_hi) must return sup |f| over the window.  slack absorbs the
    grid discretization (scale C * h_grid).
    """
    dom, vals, times = table.domain, table.values, table.times
    domain_mono = bool(np.all(~dom[:-1] | dom[1:]))
    h_noninc = bool(np.all(vals[1:] <= vals[:-1] + 1e-12))
    tol = default_contact_tol(env.grid) if contact_tol is None else contact_tol
    contact = env.contact_mask(u_values, tol)
    violations = []
    min_margin = np.inf
    checked = 0
    T = len(times)
    for k in range(0, T - stride, stride):
        if not contact[k].any():
            continue
        dt = times[k + stride] - times[k]
        bound = -2.0 * f_sup(times[k], times[k + stride]) * dt - slack
        for idx in np.argwhere(contact[k]):
            idx = tuple(idx)
            pi = snap_subgradient(env, table, k, idx)
            dh = vals[k + stride][pi] - vals[k][pi]
            margin = dh - bound
            min_margin = min(min_margin, margin)
            checked += 1
            if margin < 0:
                violations.append({"p": table.p_lattice[pi].tolist(),
                                   "t": float(times[k]), "margin": float(margin)})
            if checked >= max_points:
                break
        if checked >= max_points:
            break
    return DeltaHReport(domain_mono, h_noninc, float(min_margin), violations, checked)


def parabolic_convexity_defect(values: np.ndarray, grid: Grid, mask: np.ndarray) -> float:
    """Largest violation of (convex in x along lattice lines, nonincreasing in t)."""
    defect = 0.0
    v = values
    if grid.n == 1:
        core = mask[1:-1] & mask[:-2] & mask[2:]
        dd = v[:, 2:] + v[:, :-2] - 2 * v[:, 1:-1]
        defect = max(defect, float(np.max(np.where(core[None, :], -dd, -np.inf), initial=-np.inf)))
    else:
        core = mask[1:-1, :] & mask[:-2, :] & mask[2:, :]
        dd = v[:, 2:, :] + v[:, :-2, :] - 2 * v[:, 1:-1, :]
        defect = max(defect, float(np.max(np.where(core[None], -dd, -np.inf), initial=-np.inf)))
        core = mask[:, 1:-1] & mask[:, :-2] & mask[:, 2:]
        dd = v[:, :, 2:] + v[:, :, :-2] - 2 * v[:, :, 1:-1]
        defect = max(defect, float(np.max(np.where(core[None], -dd, -np.inf), initial=-np.inf)))
    dt_increase = float(np.max(v[1:] - v[:-1], initial=-np.inf))
    return max(defect, dt_increase)


def flatness_check(values: np.ndarray, times: np.ndarray, grid: Grid, M: float, r: float,
                   eps0: float | None = None, center=None, tol: float = 1e-9) -> dict:
    """Level-set flatness implication for a parabolic convex window.

    If the fraction of {Gamma >= M} in the ring (B_r minus B_{r/2}) over the
    early half-window is <= eps0, then Gamma <= M on B_{r/2} over the late
    half-window.  Default eps0 is half the spherical-cap share of the ring.
    """
    center = np.zeros(grid.n) if center is None else np.asarray(center, dtype=float)
    pts = grid.points() - center
    rr = np.sqrt((pts ** 2).sum(axis=-1))
    ring = (rr < r) & (rr >= r / 2)
    mask = rr < 3.0
    defect = parabolic_convexity_defect(values, grid, mask)
    if defect > 1e-7 * max(1.0, float(np.max(np.abs(values)))):
        raise ValueError(f"window is not parabolic convex (defect {defect:.3g})")
    if eps0 is None:
        cap = ring & (pts[..., 0] > r / 2)
        eps0 = 0.5 * cap.sum() / max(ring.sum(), 1)
    T = len(times)
    mid = T // 2
    early = slice(0, max(mid, 1))
    late = slice(mid, T)
    if ring.sum() == 0:
        return {"applicable": False, "reason": "ring has no grid nodes", "eps0": float(eps0)}
    frac = float(np.mean(values[early][:, ring] >= M))
    result = {"applicable": frac <= eps0, "fraction": frac, "eps0": float(eps0)}
    if frac <= eps0:
        inner = rr < r / 2
        conclusion_max = float(np.max(values[late][:, inner])) if inner.any() else -np.inf
        result["conclusion_holds"] = bool(conclusion_max <= M + tol)
        result["conclusion_max"] = conclusion_max
    return result


@dataclass
class RingSystem:
    """Dyadic rings r_i = 2^-i 2^(-1/(2-sigma)) rho0 around a contact point."""

    sigma: float
    rho0: float
    depth: int
    dt_window: float

    @classmethod
    def for_params(cls, sigma: float, rho0: float, dt_grid: float, depth: int | None = None):
        k = depth if depth is not None else max(1, int(np.ceil(1.0 / (2.0 - sigma))))
        r_k = 2.0 ** (-k) * 2.0 ** (-1.0 / (2.0 - sigma)) * rho0
        # the lemma wants dt < r_k^2; keep at least two slices in the window
        dt_window = max(r_k ** 2, 4.0 * dt_grid)
        return cls(sigma=sigma, rho0=rho0, depth=k, dt_window=dt_window)

    @property
    def radii(self) -> np.ndarray:
        base = 2.0 ** (-1.0 / (2.0 - self.sigma)) * self.rho0
        return base * 2.0 ** (-np.arange(self.depth + 1.0))


def ring_fraction_check(traj: Trajectory, env: ParabolicConvexEnvelope, table: LegendreTable,
                        rings: RingSystem, f_sup: Callable, M: float,
                        contact_point: tuple | None = None, c_ref: float = 1.0) -> dict:
    """Per-ring fractions of {u - plane >= ||f+|| M r^2} near a contact point.

    Flags whether some ring radius achieves fraction <= c_ref / M; the measured
    constant c = M * min fraction is reported (the theory's constant is not
    numeric, so the lab measures it).
    """
    grid = traj.grid
    ks = traj.window(table.times[0], 0.0)
    U = traj.values[ks]
    if contact_point is None:
        k1, idx1 = env.anchor_k, env.anchor_idx
    else:
        k1, idx1 = contact_point
    t1 = env.times[k1]
    x1 = grid.points()[idx1]
    pi = snap_subgradient(env, table, k1, idx1)
    p1 = table.p_lattice[pi]
    h1 = table.values[k1][pi]
    pts = grid.points()
    plane = (pts - table.anchor) @ p1 + h1
    dt_w = rings.dt_window
    lo, hi = t1 - dt_w, t1 - dt_w / 2
    sel = np.nonzero((env.times >= lo - 1e-12) & (env.times <= hi + 1e-12))[0]
    if len(sel) == 0:
        raise ValueError("ring window precedes the trajectory; contact too early")
    fmax = f_sup(t1 - dt_w, t1)
    rr = np.sqrt(((pts - x1) ** 2).sum(axis=-1))
    fractions = {}
    for r in rings.radii:
        ring = (rr < r) & (rr >= r / 2)
        total = int(ring.sum()) * len(sel)
        if total == 0:
            fractions[float(r)] = None
            continue
        excess = U[sel][:, ring] - plane[ring][None, :] >= fmax * M * r * r
        fractions[float(r)] = float(np.mean(excess))
    measured = [v for v in fractions.values() if v is not None]
    c_measured = M * min(measured) if measured else np.inf
    return {
        "fractions": fractions,
        "c_measured": float(c_measured),
        "bound_flag": bool(measured and min(measured) <= c_ref / M),
        "contact_point": {"t": float(t1), "x": np.atleast_1d(x1).tolist()},
        "M": M,
    }


# -- covering of the contact set ---------------------------------------------


@dataclass
class CoverRect:
    """Axis cube (side_cells grid cells) times a half-open time interval."""

    lo_cell: tuple      # lower corner in cell indices (per axis)
    side_cells: int
    l_index: int        # time interval (-(l+1) dt_c/2, -l dt_c/2]
    generation: int
    flags: dict = field(default_factory=dict)

    def diameter(self, h: float, n: int) -> float:
        return self.side_cells * h * np.sqrt(n)


@dataclass
class CoveringRectangles:
    rects: list
    failures: list
    dt_half: float
    side0_cells: int
    rho0: float
    generations: int

    @property
    def ok(self) -> bool:
        return not self.failures


def _rect_node_slices(rect: CoverRect, grid: Grid):
    return tuple(slice(c, c + rect.side_cells + 1) for c in rect.lo_cell)


def _rect_times(rect: CoverRect, times: np.ndarray, dt_half: float, extend: int = 0):
    hi = -rect.l_index * dt_half
    lo = -(rect.l_index + 1 + extend) * dt_half
    return np.nonzero((times > lo - 1e-12) & (times <= hi + 1e-12))[0]


def contact_covering(traj: Trajectory, env: ParabolicConvexEnvelope, table: LegendreTable,
                     f_sup: Callable, rho0: float, contact_tol: float | None = None,
                     C_a: float = 64.0, C_b: float = 256.0, C_c: float = 64.0,
                     eps0: float = 0.5, dt_half: float | None = None,
                     extra_generations: int = 3) -> CoveringRectangles:
    """Tile B_1 x (-1, 0], keep rectangles meeting the contact set, and split
    until the envelope pinching (a), image-measure (b) and closeness (c) flags
    hold; the split depth is capped near 1/(2-sigma) plus slack, and any
    rectangle still failing there is reported as a failure.
    """
    grid = traj.grid
    h = grid.h
    tol = default_contact_tol(grid) if contact_tol is None else contact_tol
    ks = traj.window(table.times[0], 0.0)
    U = traj.values[ks]
    times = env.times
    contact = env.contact_mask(U, tol)
    sigma = traj.meta.get("sigma", None)
    if sigma is None:
        prob = traj.meta.get("problem")
        sigma = prob.params.sigma if prob is not None else 1.5
    k_gen = max(1, int(np.ceil(1.0 / (2.0 - sigma)))) + extra_generations

    # initial cube side: largest power-of-two cell count with diameter <= rho0/4
    target = rho0 / (4.0 * np.sqrt(grid.n))
    side0 = 1
    while side0 * 2 * h <= target:
        side0 *= 2
    if dt_half is None:
        dt_half = max(4 * traj.dt, side0 * h * 0.25)
    n_l = int(np.ceil((times[-1] - times[0]) / dt_half))

    pts = grid.points()
    plane_cache = {}

    def plane_values(k, idx):
        key = (k, idx)
        if key not in plane_cache:
            pi = snap_subgradient(env, table, k, idx)
            p1 = table.p_lattice[pi]
            h1 = table.values[k][pi]
            plane_cache[key] = (pts - table.anchor) @ p1 + h1
        return plane_cache[key]

    def eval_flags(rect: CoverRect):
        sl = _rect_node_slices(rect, grid)
        tk = _rect_times(rect, times, dt_half)
        if len(tk) == 0:
            return None
        sub = contact[tk][(slice(None),) + sl]
        if not sub.any():
            return None
        kk, *где = np.nonzero(sub)
        k1 = int(tk[kk[0]])
        idx1 = tuple(int(w[0]) + rect.lo_cell[a] for a, w in enumerate(где))
        d = rect.diameter(h, grid.n)
        t_hi = -rect.l_index * dt_half
        t_lo = -(rect.l_index + 1) * dt_half
        fI = max(f_sup(t_lo, t_hi), 1e-12)
        plane = plane_values(k1, idx1)
        flags = {}
        # (a) Gamma pinched between two planes at distance C ||f|| d^2
        dev = np.max(np.abs(env.values[tk][(slice(None),) + sl] - plane[sl][None]))
        flags["a"] = {"const": float(dev / (fI * d * d)), "pass": bool(dev <= C_a * fI * d * d)}
        # (b) image measure of Phi over the rectangle
        phi_measure = _phi_measure(env, table, tk, sl, fI)
        flags["b"] = {"const": float(phi_measure / (fI ** (grid.n + 1) * _rect_volume(rect, grid, dt_half))),
                      "pass": bool(phi_measure <= C_b * fI ** (grid.n + 1) * _rect_volume(rect, grid, dt_half))}
        # (c) u close to Gamma on most of the dilation
        frac = _closeness_fraction(rect, grid, U, env, times, dt_half, C_c * fI * d * d)
        flags["c"] = {"const": float(frac), "pass": bool(frac >= 1.0 - eps0)}
        return flags

    rects, failures = [], []
    queue = []
    m0 = 2 * grid.m + 1
    for l in range(n_l):
        c = 0
        while c + side0 <= m0 - 1:
            lo = (c,) * grid.n
            if grid.n == 1:
                queue.append(CoverRect((c,), side0, l, 0))
            else:
                c2 = 0
                while c2 + side0 <= m0 - 1:
                    queue.append(CoverRect((c, c2), side0, l, 0))
                    c2 += side0
            c += side0
    while queue:
        rect = queue.pop()
        flags = eval_flags(rect)
        if flags is None:
            continue
        rect.flags = flags
        if all(f["pass"] for f in flags.values()):
            rects.append(rect)
        elif rect.side_cells >= 2 and rect.generation < k_gen:
            half = rect.side_cells // 2
            for corner in np.ndindex(*(2,) * grid.n):
                lo = tuple(rect.lo_cell[a] + corner[a] * half for a in range(grid.n))
                queue.append(CoverRect(lo, half, rect.l_index, rect.generation + 1))
        else:
            failures.append(rect)
    return CoveringRectangles(rects=rects, failures=failures, dt_half=dt_half,
                              side0_cells=side0, rho0=rho0, generations=k_gen)


def _rect_volume(rect: CoverRect, grid: Grid, dt_half: float) -> float:
    return (rect.side_cells * grid.h) ** grid.n * dt_half / 2 * 2  # side^n * |I|


def _phi_measure(env, table, tk, sl, fI) -> float:
    """Discrete measure of Phi(K): slope cells hit by subgradients, each with
    its h-span (floored at the time-resolution scale)."""
    hp = env.grid.h
    spans = {}
    for k in tk:
        if env.grid.n == 1:
            los = env.sub_lo[k][sl[0]]
            his = env.sub_hi[k][sl[0]]
            cand = np.concatenate([los[np.isfinite(los)], his[np.isfinite(his)]])
        else:
            g = env.sub_lo[k][sl[0], sl[1]].reshape(-1, 2)
            cand = g
        for p in np.atleast_1d(cand).reshape(-1, env.grid.n):
            pi = table.index_of_p(p)
            hval = table.values[k][pi]
            if pi in spans:
                lo, hi = spans[pi]
                spans[pi] = (min(lo, hval), max(hi, hval))
            else:
                spans[pi] = (hval, hval)
    dt = float(np.diff(table.times).mean()) if len(table.times) > 1 else 1e-6
    floor = 2.0 * fI * dt
    total = sum((hi - lo) + floor for lo, hi in spans.values())
    return total * hp ** env.grid.n


def _closeness_fraction(rect, grid, U, env, times, dt_half, thresh) -> float:
    """Fraction of the dilated rectangle where u < Gamma + thresh."""
    factor = int(np.ceil(16 * np.sqrt(grid.n)))
    half_ext = rect.side_cells * factor // 2
    center = tuple(c + rect.side_cells // 2 for c in rect.lo_cell)
    m0 = 2 * grid.m + 1
    sl = tuple(slice(max(0, c - half_ext), min(m0, c + half_ext + 1)) for c in center)
    tk = _rect_times(rect, times, dt_half, extend=2)
    if len(tk) == 0:
        return 1.0
    close = U[tk][(slice(None),) + sl] < env.values[tk][(slice(None),) + sl] + thresh
    return float(np.mean(close))


def cone_inclusion_check(traj: Trajectory, env: ParabolicConvexEnvelope, table: LegendreTable,
                         n_points: int = 200, rng: np.random.Generator | None = None,
                         contact_tol: float | None = None) -> dict:
    """Slide cone planes (p,h), |h| > 4|p|, h in [-1,0], forward in time until
    the first discrete touch; the touch must land on the contact set and the
    Legendre data must reproduce (p,h) within grid tolerance."""
    rng = rng or np.random.default_rng(0)
    grid = traj.grid
    tol = default_contact_tol(grid) if contact_tol is None else contact_tol
    ks = traj.window(table.times[0], 0.0)
    U = traj.values[ks]
    pts = grid.points()
    plat = table.p_lattice
    pnorm = np.abs(plat).sum(axis=1) if grid.n == 1 else np.sqrt((plat ** 2).sum(axis=1))
    candidates = []
    for pi in range(len(plat)):
        if 4.0 * pnorm[pi] >= 0.98:
            continue
        h_levels = np.linspace(-0.95, -4.0 * pnorm[pi] - 0.02, 8)
        for hv in h_levels:
            if abs(hv) > 4.0 * pnorm[pi]:
                candidates.append((pi, float(hv)))
    if not candidates:
        raise ValueError("no cone lattice points available")
    sel = rng.choice(len(candidates), size=min(n_points, len(candidates)), replace=False)
    witnesses, misses = [], []
    vals = table.values
    b3 = env.b3
    X3 = (pts[b3] - table.anchor).reshape(-1, grid.n)
    coords3 = np.argwhere(b3)
    for ci in sel:
        pi, hv = candidates[ci]
        p = plat[pi]
        touched = np.nonzero(vals[:, pi] <= hv + 1e-12)[0]
        if len(touched) == 0:
            misses.append({"p": p.tolist(), "h": hv, "reason": "plane never touches by t=0"})
            continue
        k1 = int(touched[0])
        drop = vals[k1 - 1, pi] - vals[k1, pi] if k1 > 0 else 0.0
        slack = max(float(drop), 1e-9) + tol
        # the binding node of the ubar-constraint at the touch time
        w = np.where(env.b1[b3], np.minimum(np.minimum.accumulate(U, axis=0)[k1][b3], 0.0), 0.0)
        obj = w - X3 @ p
        j = int(np.argmin(obj))
        idx1 = tuple(coords3[j])
        contact_ok = bool(U[k1][idx1] - env.values[k1][idx1] <= tol + slack)
        h_ok = bool(abs(vals[k1, pi] - hv) <= slack)
        sub_ok = _p_in_subdiff(env, k1, idx1, p, 2 * grid.h)
        rec = {"p": p.tolist(), "h": hv, "t": float(table.times[k1]),
               "x": np.atleast_1d(pts[idx1]).tolist(),
               "contact": contact_ok, "h_match": h_ok, "subdiff": sub_ok}
        if contact_ok and h_ok and sub_ok:
            witnesses.append(rec)
        else:
            misses.append(rec)
    return {"witnessed": len(witnesses), "tested": len(sel), "ok": not misses,
            "misses": misses[:20]}


def _p_in_subdiff(env, k, idx, p, ptol) -> bool:
    if env.grid.n == 1:
        lo, hi = env.sub_lo[k][idx], env.sub_hi[k][idx]
        return bool(lo - ptol <= p[0] <= hi + ptol)
    g = env.sub_lo[k][idx]
    return bool(np.linalg.norm(g - p) <= 4 * ptol)


# -- the weak ABP inequality ---------------------------------------------------


def normalize_for_abp(traj: Trajectory, window_from: float = -1.0):
    """Rescale so sup of u^- over B_1 x (window, 0] is 1; the forcing must be
    scaled by the same factor.  Rejects trajectories that never go negative."""
    grid = traj.grid
    ks = traj.window(window_from, 0.0)
    b1 = grid.ball_mask(1.0 + 1e-12)
    s = -float(np.min(np.where(b1[None, ...], traj.values[ks], np.inf)))
    if s <= 1e-12:
        raise ValueError("u never negative in B_1: ABP normalization impossible; rejected")
    g = traj.exterior_t
    scaled = Trajectory(grid, traj.t0, traj.dt, traj.values / s,
                        lambda pts, t: np.asarray(g(pts, t), dtype=float) / s,
                        meta=dict(traj.meta))
    return scaled, s


def verify_abp_hypotheses(traj: Trajectory, params, f_of_t: Callable, tol: float,
                          rhs_radius: float = 0.5, domain_radius: float = 2.0) -> dict:
    """Discrete check of u_t - M^- u >= -f(t) chi_{B_rhs} on B_domain."""
    from .solver import OperatorSpec, residual_wrt

    grid = traj.grid
    mask = grid.ball_mask(min(domain_radius, grid.radius - grid.h))
    res = residual_wrt(traj, params, OperatorSpec("extremal_minus"), rhs=0.0,
                       domain_mask=mask)
    pts = grid.points()
    chi = (np.sqrt((pts ** 2).sum(axis=-1)) < rhs_radius).astype(float)
    worst = 0.0
    for k, t in enumerate(res.times):
        lhs = res.values[k]
        bound = -f_of_t(t) * chi
        viol = np.nanmin(lhs - bound)
        worst = min(worst, float(viol))
    return {"ok": worst >= -tol, "worst_violation": worst}


def abp_inequality_check(traj: Trajectory, env: ParabolicConvexEnvelope, f_of_t: Callable,
                         params, C: float = 1.0, measuring_ball: str = "statement",
                         contact_floor: float | None = None) -> dict:
    """Right-hand side of the weak ABP inequality by slice-wise cell counting.

    The continuum threshold C 4^(-1/(2-sigma)) f(t) collapses below grid
    resolution as sigma -> 2, so the effective threshold is floored at the
    discrete contact tolerance; both the raw and floored integrals are
    reported, as are both published choices of the measuring ball.
    """
    grid = traj.grid
    sigma, n = params.sigma, params.n
    scale = 4.0 ** (-1.0 / (2.0 - sigma))
    floor = default_contact_tol(grid) if contact_floor is None else contact_floor
    radius_stmt = params.abp_ball_radius()
    radius_proof = 9.0 * np.sqrt(n) * params.rho0
    radius = radius_stmt if measuring_ball == "statement" else radius_proof
    radius = min(radius, grid.radius)
    ball = grid.ball_mask(radius)
    cell = grid.h ** n
    ks = env.times
    dt = float(np.diff(ks).mean())
    raw = floored = 0.0
    per_slice = []
    U = traj.values[traj.window(ks[0], 0.0)]
    for k, t in enumerate(ks):
        ft = float(f_of_t(t))
        thr_raw = C * scale * ft
        thr_flo = max(thr_raw, floor)
        below_raw = (U[k] - env.values[k] < thr_raw) & ball
        below_flo = (U[k] - env.values[k] < thr_flo) & ball
        raw += ft ** (n + 1) * below_raw.sum() * cell * dt
        floored += ft ** (n + 1) * below_flo.sum() * cell * dt
        per_slice.append((float(t), float(below_flo.sum() * cell)))
    return {
        "rhs_raw": float(raw),
        "rhs_floored": float(floored),
        "C": C,
        "threshold_scale": float(scale),
        "contact_floor": float(floor),
        "measuring_ball_radius": float(radius),
        "measuring_ball_radius_statement": float(radius_stmt),
        "measuring_ball_radius_proof": float(radius_proof),
        "measure_vs_time": per_slice,
    }
