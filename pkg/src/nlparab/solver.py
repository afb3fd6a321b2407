"""Monotone explicit time stepping for u_t - I u = f with exterior Dirichlet data.

The scheme is forward Euler on the interior of the equation's domain:
u^{k+1} = u^k + dt (I_h u^k + f(., t_k)); nodes inside the grid box but outside
the domain, and the whole exterior, are resampled from the Dirichlet data at
each time.  Under the CFL bound every update is nondecreasing in every input
value, which gives the discrete comparison and maximum principles exactly.

The residual of a trajectory is the backward difference in time minus the
discrete operator on the earlier slice minus the forcing, i.e. exactly the
quantity the scheme sets to zero; for externally supplied trajectories it is
the discrete stand-in for the viscosity inequalities.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .grids import Grid, SpatialSlice, Trajectory
from .kernels import Kernel, KernelClassParams
from .operators import DiscreteOperator, GridOperatorEngine, KernelWeights, build_operator


class CFLViolation(RuntimeError):
    pass


@dataclass
class OperatorSpec:
    """Which nonlocal operator drives the evolution."""

    kind: str                      # 'linear' | 'extremal_plus' | 'extremal_minus' | 'isaacs'
    kernel: Kernel | None = None   # for 'linear'
    families: Sequence[Sequence[Kernel]] | None = None  # for 'isaacs', rows = inf index
    sup_inf: bool = False

    def __post_init__(self):
        if self.kind == "linear" and self.kernel is None:
            raise ValueError("linear operator needs a kernel")
        if self.kind == "isaacs":
            if not self.families or any(len(r) == 0 for r in self.families):
                raise ValueError("Isaacs operator needs a nonempty family")
            # a single-kernel family degenerates to the linear operator
            if len(self.families) == 1 and len(self.families[0]) == 1:
                object.__setattr__(self, "kind", "linear")
                object.__setattr__(self, "kernel", self.families[0][0])


def linear_spec(kernel: Kernel) -> OperatorSpec:
    return OperatorSpec("linear", kernel=kernel)


def extremal_spec(plus: bool) -> OperatorSpec:
    return OperatorSpec("extremal_plus" if plus else "extremal_minus")


def isaacs_spec(families, sup_inf=False) -> OperatorSpec:
    return OperatorSpec("isaacs", families=families, sup_inf=sup_inf)


@dataclass
class Problem:
    """Dirichlet problem for u_t - I u = f on domain x (t_start, 0]."""

    operator: OperatorSpec
    params: KernelClassParams
    grid: Grid
    t_start: float
    exterior: Callable            # g(points, t) -> values
    initial: Callable             # u0(points) -> values
    rhs: Callable | float = 0.0   # f(points, t) -> values, or a constant
    domain_radius: float | None = None   # None: every node strictly inside the box
    domain_kind: str = "ball"     # 'ball' | 'box'
    dt: float | None = None       # None: cfl_safety * cfl_bound
    cfl_safety: float = 0.85
    R: float | None = None        # operator truncation; default 2 * box radius

    def __post_init__(self):
        if self.t_start >= 0:
            raise ValueError("t_start must be negative (time interval (t_start, 0])")
        if self.domain_radius is not None and self.domain_radius > self.grid.radius - self.grid.h + 1e-12:
            raise ValueError("grid box must contain the domain plus a margin of >= 1 cell")

    def domain_mask(self) -> np.ndarray:
        if self.domain_radius is None:
            mask = np.zeros(self.grid.shape, dtype=bool)
            inner = (slice(1, -1),) * self.grid.n
            mask[inner] = True
            return mask
        if self.domain_kind == "ball":
            return self.grid.ball_mask(self.domain_radius)
        return self.grid.box_mask(self.domain_radius)

    def rhs_values(self, pts: np.ndarray, t: float) -> np.ndarray:
        if callable(self.rhs):
            return np.asarray(self.rhs(pts, t), dtype=float)
        return np.full(pts.shape[:-1], float(self.rhs))

    def truncation(self) -> float:
        return self.R if self.R is not None else 2.0 * self.grid.radius


class ProblemEngine:
    """Cached stencil, weights and masks for stepping one problem."""

    def __init__(self, problem: Problem):
        self.problem = problem
        grid, params = problem.grid, problem.params
        self.op = build_operator(grid.n, params.sigma, grid.h, problem.truncation(),
                                 box_radius=grid.radius)
        self.engine = GridOperatorEngine(self.op, grid)
        self.mask = problem.domain_mask()
        self.pts = grid.points()
        spec = problem.operator
        self.kweights = None
        self.fam_weights = None
        if spec.kind == "linear":
            self.kweights = self.op.kernel_weights(spec.kernel)
        elif spec.kind == "isaacs":
            self.fam_weights = [[self.op.kernel_weights(k) for k in row] for row in spec.families]

    def apply(self, sl: SpatialSlice) -> np.ndarray:
        spec = self.problem.operator
        if spec.kind == "linear":
            return self.engine.apply_linear(self.kweights, sl)
        if spec.kind == "extremal_plus":
            return self.engine.apply_extremal(self.problem.params.Lambda, sl, plus=True)
        if spec.kind == "extremal_minus":
            return self.engine.apply_extremal(self.problem.params.Lambda, sl, plus=False)
        return self.engine.apply_family(self.fam_weights, sl, sup_inf=spec.sup_inf)

    def weight_mass(self) -> float:
        spec, lam = self.problem.operator, self.problem.params.Lambda
        if spec.kind == "linear":
            return self.kweights.mass
        if spec.kind == "isaacs":
            return max(kw.mass for row in self.fam_weights for kw in row)
        return lam * self.op.base.mass


def cfl_bound(problem: Problem) -> float:
    """Largest stable dt: reciprocal of the total positive weight mass of the
    discrete operator (with the Lambda coefficient for extremal/Isaacs)."""
    return 1.0 / ProblemEngine(problem).weight_mass()


def step(sl: SpatialSlice, problem: Problem, dt: float, engine: ProblemEngine | None = None,
         check_cfl: bool = True) -> SpatialSlice:
    """One forward-Euler step; exterior and non-domain nodes resampled at t+dt."""
    eng = engine or ProblemEngine(problem)
    if check_cfl and dt > (1.0 + 1e-9) / eng.weight_mass():
        raise CFLViolation(f"dt={dt} exceeds the CFL bound {1.0 / eng.weight_mass()}")
    rhs = problem.rhs_values(eng.pts, sl.t)
    new_vals = sl.values + dt * (eng.apply(sl) + rhs)
    t_new = sl.t + dt
    boundary = np.asarray(problem.exterior(eng.pts, t_new), dtype=float)
    out = np.where(eng.mask, new_vals, boundary)
    g = problem.exterior
    return SpatialSlice(sl.grid, out, lambda pts, _t=t_new: g(pts, _t), t=t_new)


def solve(problem: Problem) -> Trajectory:
    """Iterate the explicit scheme from t_start to 0 and record every slice."""
    eng = ProblemEngine(problem)
    span = -problem.t_start
    if problem.dt is not None:
        dt = problem.dt
        if dt > (1.0 + 1e-9) / eng.weight_mass():
            raise CFLViolation(f"requested dt={dt} exceeds the CFL bound")
    else:
        dt = problem.cfl_safety / eng.weight_mass()
    n_steps = max(1, int(np.ceil(span / dt - 1e-12)))
    dt = span / n_steps
    pts = eng.pts
    u0 = np.asarray(problem.initial(pts), dtype=float)
    boundary0 = np.asarray(problem.exterior(pts, problem.t_start), dtype=float)
    vals0 = np.where(eng.mask, u0, boundary0)
    g = problem.exterior
    sl = SpatialSlice(problem.grid, vals0, lambda p, _t=problem.t_start: g(p, _t), t=problem.t_start)
    out = np.empty((n_steps + 1,) + problem.grid.shape)
    out[0] = sl.values
    for k in range(n_steps):
        sl = step(sl, problem, dt, engine=eng, check_cfl=False)
        out[k + 1] = sl.values
    return Trajectory(problem.grid, problem.t_start, dt, out, problem.exterior,
                      meta={"problem": problem, "dt": dt, "n_steps": n_steps})


@dataclass
class ResidualField:
    """u_t - I_h u - f on interior nodes, one array per step (index k is the
    backward difference at t_k against the operator at t_{k-1})."""

    values: np.ndarray           # (T-1,) + grid.shape; NaN outside the domain
    mask: np.ndarray
    times: np.ndarray

    def sup_interior(self) -> float:
        return float(np.nanmax(np.abs(self.values)))

    def min_interior(self) -> float:
        return float(np.nanmin(self.values))


def residual(traj: Trajectory, problem: Problem) -> ResidualField:
    """Residual of the problem's own scheme; identically zero (to roundoff) on
    trajectories produced by solve(problem)."""
    eng = ProblemEngine(problem)
    return _residual_impl(traj, eng.apply, problem.rhs_values, eng.mask, eng.pts)


def residual_wrt(traj: Trajectory, params: KernelClassParams, operator: OperatorSpec,
                 rhs: Callable | float = 0.0, domain_mask: np.ndarray | None = None,
                 R: float | None = None) -> ResidualField:
    """Residual u_t - M_h u - f of a trajectory against an arbitrary operator;
    this is the discrete form of the viscosity sub/supersolution inequalities."""
    grid = traj.grid
    prob = Problem(operator=operator, params=params, grid=grid, t_start=-1.0,
                   exterior=lambda p, t: np.zeros(np.asarray(p).shape[:-1]),
                   initial=lambda p: np.zeros(np.asarray(p).shape[:-1]),
                   rhs=rhs, R=R)
    eng = ProblemEngine(prob)
    mask = domain_mask if domain_mask is not None else eng.mask
    return _residual_impl(traj, eng.apply, prob.rhs_values, mask, eng.pts)


def _residual_impl(traj, apply_fn, rhs_fn, mask, pts) -> ResidualField:
    T = len(traj)
    if T < 2:
        raise ValueError("need at least two slices for a residual")
    vals = np.full((T - 1,) + traj.grid.shape, np.nan)
    for k in range(1, T):
        prev = traj.slice_at(k - 1)
        r = (traj.values[k] - traj.values[k - 1]) / traj.dt - apply_fn(prev) - rhs_fn(pts, prev.t)
        vals[k - 1] = np.where(mask, r, np.nan)
    return ResidualField(values=vals, mask=mask, times=traj.times[1:])


def shifted_problem(problem: Problem, shift) -> Problem:
    """The same problem with data (and domain) translated by a lattice vector;
    used to check exact translation covariance of x-independent operators."""
    s = np.atleast_1d(np.asarray(shift, dtype=float))
    g, u0 = problem.exterior, problem.initial

    def g_s(pts, t):
        return g(np.asarray(pts, dtype=float) - s, t)

    def u0_s(pts):
        return u0(np.asarray(pts, dtype=float) - s)

    rhs = problem.rhs
    if callable(rhs):
        rhs_s = lambda pts, t: rhs(np.asarray(pts, dtype=float) - s, t)
    else:
        rhs_s = rhs
    # domain must move with the data; represent it via a box/ball mask override
    new = replace(problem, exterior=g_s, initial=u0_s, rhs=rhs_s)
    if problem.domain_radius is not None:
        masked = _ShiftedDomainProblem(new, s)
        return masked
    return new


class _ShiftedDomainProblem(Problem):
    """Problem whose domain ball/box is translated by a lattice vector."""

    def __init__(self, base: Problem, shift):
        self.__dict__.update(base.__dict__)
        self._shift = np.atleast_1d(np.asarray(shift, dtype=float))

    def domain_mask(self) -> np.ndarray:
        if self.domain_kind == "ball":
            return self.grid.ball_mask(self.domain_radius, center=self._shift)
        return self.grid.box_mask(self.domain_radius, center=self._shift)


def export_csv(traj: Trajectory, path: str):
    """One row per (t, x, u); see FORMATS.md."""
    grid = traj.grid
    pts = grid.points().reshape(-1, grid.n)
    with open(path, "w") as fh:
        cols = ["t"] + [f"x{i+1}" for i in range(grid.n)] + ["u"]
        fh.write(",".join(cols) + "\n")
        for k, t in enumerate(traj.times):
            flat = traj.values[k].reshape(-1)
            for p, v in zip(pts, flat):
                coords = ",".join(format(c, ".17g") for c in p)
                fh.write(f"{format(t, '.17g')},{coords},{format(v, '.17g')}\n")


BINARY_MAGIC = b"NLPB"


def export_binary(traj: Trajectory, path: str):
    """Compact dump: magic, version, dims, then row-major float64 values.

    Header (little-endian): 4s magic, u32 version, u32 n, u32 m, f64 h,
    f64 t0, f64 dt, u64 slice count; then values[T, (2m+1)^n] row-major.
    """
    import struct

    grid = traj.grid
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", BINARY_MAGIC, 1, grid.n, grid.m))
        fh.write(struct.pack("<dddQ", grid.h, traj.t0, traj.dt, len(traj)))
        traj.values.astype("<f8").tofile(fh)


def load_binary(path: str, exterior_t=None) -> Trajectory:
    import struct

    with open(path, "rb") as fh:
        magic, version, n, m = struct.unpack("<4sIII", fh.read(16))
        if magic != BINARY_MAGIC:
            raise ValueError("not a trajectory dump")
        h, t0, dt, T = struct.unpack("<dddQ", fh.read(32))
        grid = Grid(int(n), h, int(m))
        vals = np.fromfile(fh, dtype="<f8").reshape((T,) + grid.shape)
    ext = exterior_t or (lambda pts, t: np.zeros(np.asarray(pts).shape[:-1]))
    return Trajectory(grid, t0, dt, vals, ext)
