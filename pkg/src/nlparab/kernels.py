"""Ellipticity class parameters, jump kernels, weights and kernel-level checks.

Kernels are stored as a symmetric amplitude a(y) against the reference
singular factor (2-sigma)|y|^(-n-sigma); the class-L0 pinching
(2-sigma) Lambda^{-1} <= K(y)|y|^{n+sigma} <= (2-sigma) Lambda is then a
pointwise bound on the amplitude, which the quadrature preserves node by node.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

#: radial floor for amplitude evaluation; below this the amplitude is frozen,
#: which is exact for power kernels and a vanishing-mass approximation otherwise
AMPLITUDE_R_FLOOR = 1e-7


@dataclass(frozen=True)
class KernelClassParams:
    """Parameters (n, sigma, sigma0, Lambda, rho0) of the ellipticity class."""

    n: int
    sigma: float
    sigma0: float
    Lambda: float
    rho0: float = 0.25

    def __post_init__(self):
        if not (0 < self.sigma0 < self.sigma < 2):
            raise ValueError("need 0 < sigma0 < sigma < 2")
        if self.Lambda < 1:
            raise ValueError("need Lambda >= 1")
        if not (0 < self.rho0 < 1):
            raise ValueError("need rho0 in (0,1)")

    def abp_ball_radius(self) -> float:
        """Radius 1/2 + 9 sqrt(n) 2^(-1/(2-sigma)) rho0 of the measuring ball."""
        return 0.5 + 9.0 * np.sqrt(self.n) * 2.0 ** (-1.0 / (2.0 - self.sigma)) * self.rho0

    def abp_feasible(self) -> bool:
        return self.abp_ball_radius() < 2.0

    def with_sigma(self, sigma: float) -> "KernelClassParams":
        return KernelClassParams(self.n, sigma, self.sigma0, self.Lambda, self.rho0)


def _norms(pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    return np.sqrt((pts ** 2).sum(axis=-1))


@dataclass
class Kernel:
    """Jump kernel K(y) = (2-sigma) * amplitude(y) * |y|^(-n-sigma).

    amplitude must be even and bounded; class_tag is 'L0' or 'L1'.
    """

    n: int
    sigma: float
    amplitude: Callable
    class_tag: str = "L0"
    label: str = "kernel"

    def __post_init__(self):
        rng = np.random.default_rng(0)
        probe = rng.normal(size=(8, self.n))
        a_pos = np.asarray(self.amplitude(probe), dtype=float)
        a_neg = np.asarray(self.amplitude(-probe), dtype=float)
        if np.max(np.abs(a_pos - a_neg)) > 1e-8 * (1 + np.max(np.abs(a_pos))):
            raise ValueError("kernel amplitude must be symmetric: K(y) = K(-y)")
        if np.min(a_pos) < 0:
            raise ValueError("kernel amplitude must be nonnegative")

    def eval(self, pts) -> np.ndarray:
        """K evaluated at point arrays of shape (..., n); not defined at 0."""
        pts = np.asarray(pts, dtype=float)
        r = _norms(pts)
        return (2.0 - self.sigma) * self.amplitude_clamped(pts) * r ** (-(self.n + self.sigma))

    def amplitude_clamped(self, pts) -> np.ndarray:
        """Amplitude with |y| clamped away from 0 to keep evaluation finite."""
        pts = np.asarray(pts, dtype=float)
        r = _norms(pts)
        scale = np.where(r < AMPLITUDE_R_FLOOR, AMPLITUDE_R_FLOOR / np.maximum(r, 1e-300), 1.0)
        return np.asarray(self.amplitude(pts * scale[..., None]), dtype=float)


def power_kernel(n: int, sigma: float, multiplier: float = 1.0, class_tag: str = "L1") -> Kernel:
    """K(y) = (2-sigma) * multiplier * |y|^(-n-sigma)."""
    if multiplier <= 0:
        raise ValueError("multiplier must be positive")

    def amp(pts):
        pts = np.asarray(pts, dtype=float)
        return np.full(pts.shape[:-1], float(multiplier))

    return Kernel(n, sigma, amp, class_tag=class_tag, label=f"power(x{multiplier:g})")


def modulated_kernel(n: int, sigma: float, amplitude: Callable, class_tag: str = "L0",
                     label: str = "modulated") -> Kernel:
    return Kernel(n, sigma, amplitude, class_tag=class_tag, label=label)


def tabulated_kernel(n: int, sigma: float, radii: Sequence[float], amps: Sequence[float],
                     class_tag: str = "L0") -> Kernel:
    """Radial amplitude interpolated from a table (clamped at both ends)."""
    radii = np.asarray(radii, dtype=float)
    amps = np.asarray(amps, dtype=float)
    if radii.ndim != 1 or radii.shape != amps.shape or len(radii) < 2:
        raise ValueError("need matching 1-d radius/amplitude tables of length >= 2")

    def amp(pts):
        return np.interp(_norms(pts), radii, amps)

    return Kernel(n, sigma, amp, class_tag=class_tag, label="tabulated")


def random_l0_kernel(params: KernelClassParams, rng: np.random.Generator,
                     n_modes: int = 3) -> Kernel:
    """Random smooth kernel with amplitude in [Lambda^-1, Lambda] exactly."""
    freqs = rng.uniform(0.5, 4.0, size=(n_modes, params.n))
    coefs = rng.normal(size=n_modes)
    norm = np.sum(np.abs(coefs)) + 1e-12
    lam = params.Lambda

    def amp(pts, freqs=freqs, coefs=coefs, norm=norm, lam=lam):
        pts = np.asarray(pts, dtype=float)
        s = np.zeros(pts.shape[:-1])
        for f, c in zip(freqs, coefs):
            s = s + c * np.cos(pts @ f)
        return lam ** (s / norm)  # s/norm in [-1,1]

    return Kernel(params.n, params.sigma, amp, class_tag="L0", label="random-L0")


def kernel_from_config(n: int, sigma: float, cfg: dict) -> list:
    """Build kernels from a flat key-value section.

    kind = power | tabulated | family.  power: multiplier.  tabulated:
    radii, amplitudes (comma lists).  family: multipliers (comma list).
    """
    kind = cfg.get("kind", "power")
    if kind == "power":
        return [power_kernel(n, sigma, float(cfg.get("multiplier", 1.0)))]
    if kind == "tabulated":
        radii = [float(v) for v in str(cfg["radii"]).split(",")]
        amps = [float(v) for v in str(cfg["amplitudes"]).split(",")]
        return [tabulated_kernel(n, sigma, radii, amps)]
    if kind == "family":
        mults = [float(v) for v in str(cfg.get("multipliers", "1.0")).split(",")]
        return [power_kernel(n, sigma, m) for m in mults]
    raise ValueError(f"unknown kernel kind {kind!r}")


@dataclass(frozen=True)
class Weight:
    """Integrable tail weight omega(y) = 1 / (1 + |y|^(n+sigma))."""

    n: int
    sigma: float

    def eval(self, pts) -> np.ndarray:
        return 1.0 / (1.0 + _norms(pts) ** (self.n + self.sigma))

    def tail_mass(self, R: float, k: int = 64) -> float:
        """Numerical integral of omega over {|y| > R}."""
        # substitute r = R/s to map (R, inf) to (0, 1]
        s = (np.arange(k) + 0.5) / k
        r = R / s
        surf = 2.0 if self.n == 1 else 2.0 * np.pi * r
        integrand = surf / (1.0 + r ** (self.n + self.sigma)) * (R / s ** 2)
        return float(np.sum(integrand) / k)


def weighted_norm(u, w: Weight, R: float = 4096.0) -> float:
    """L^1(omega) norm: lattice-cell quadrature out to R plus a modeled tail.

    The exterior callable must be absolutely integrable against omega;
    bounded exteriors suffice since omega is integrable.
    """
    grid = u.grid
    pad = max(1, int(np.ceil((R - grid.radius) / grid.h)))
    vals = np.abs(u.extended(pad))
    pts = grid.extended_points(pad)
    cell = grid.h ** grid.n
    core = float(np.sum(vals * w.eval(pts)) * cell)
    R_eff = grid.radius + pad * grid.h
    # model the far tail with the boundary-shell magnitude of |u|
    shell = np.asarray(u.exterior(pts[(0,) * grid.n][None, :]), dtype=float)
    tail = float(np.abs(shell).max()) * w.tail_mass(R_eff)
    return core + tail


def l1_smoothness_check(kernel: Kernel, params: KernelClassParams, tol: float = 0.05,
                        n_h: int = 4, R: float = 256.0, pts_per_h: int = 4096):
    """Check the integrated translate-smoothness condition of class L1.

    Numerically integrates |K(y) - K(y-h)|/|h| over R^n minus B_rho0 for a
    decreasing sample of shifts |h| <= rho0/2 along coordinate directions.
    Returns (ok, measured_max); ok means max <= Lambda (1 + tol).
    """
    rho0 = params.rho0
    hs = [rho0 / 2 ** (k + 1) for k in range(n_h)]
    dirs = [np.eye(params.n)[i] for i in range(params.n)]
    measured = 0.0
    for hmag in hs:
        for e in dirs:
            shift = hmag * e
            if params.n == 1:
                measured = max(measured, _l1_integral_1d(kernel, rho0, shift[0], R, pts_per_h))
            else:
                measured = max(measured, _l1_integral_2d(kernel, rho0, shift, R))
    ok = measured <= params.Lambda * (1.0 + tol)
    return ok, measured


def _l1_integral_1d(kernel: Kernel, rho0: float, h: float, R: float, npts: int) -> float:
    total = 0.0
    for sgn in (1.0, -1.0):
        y = sgn * np.geomspace(rho0, R, npts)
        # resolve scales below |h| with a linear refinement near rho0
        y_fine = sgn * np.linspace(rho0, min(rho0 + 8 * abs(h), R), npts // 2)
        y = np.unique(np.concatenate([y, y_fine]) * sgn) * sgn
        vals = np.abs(kernel.eval(y[:, None]) - kernel.eval(y[:, None] - h)) / abs(h)
        total += float(np.trapz(vals, sgn * y))
    return total


def _l1_integral_2d(kernel: Kernel, rho0: float, shift: np.ndarray, R: float,
                    n_r: int = 600, n_theta: int = 96) -> float:
    r = np.geomspace(rho0, R, n_r)
    theta = (np.arange(n_theta) + 0.5) * 2 * np.pi / n_theta
    om = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    pts = r[:, None, None] * om[None, :, :]
    vals = np.abs(kernel.eval(pts) - kernel.eval(pts - shift)) / np.linalg.norm(shift)
    ang = vals.sum(axis=1) * (2 * np.pi / n_theta)
    return float(np.trapz(ang * r, r))
