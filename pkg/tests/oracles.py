"""Independent adaptive-quadrature oracles for the nonlocal operators.

These never touch the lattice quadrature: second differences come from
analytic formulas, the radial singularity is flattened with the exact
substitution t = y^(2-sigma), and for |y| below a floor the second
difference is replaced by its Taylor value from the analytic Hessian
(cancellation-free).
"""
from __future__ import annotations

import numpy as np
from scipy import integrate

Y_FLOOR = 1e-4


class TestFunction1D:
    """Analytic profile with second derivative, decaying at infinity."""

    def __init__(self, f, d2f, name):
        self.f, self.d2f, self.name = f, d2f, name

    def delta(self, x, y):
        y = abs(y)
        if y < Y_FLOOR:
            return 0.5 * self.d2f(x) * y * y
        return 0.5 * (self.f(x + y) + self.f(x - y)) - self.f(x)

    def delta_over_y2(self, x, y):
        """delta / y^2 without cancellation or division at tiny y."""
        y = abs(y)
        if y < Y_FLOOR:
            return 0.5 * self.d2f(x)
        return (0.5 * (self.f(x + y) + self.f(x - y)) - self.f(x)) / (y * y)


def gaussian1d():
    return TestFunction1D(
        lambda x: np.exp(-x ** 2),
        lambda x: (4 * x ** 2 - 2) * np.exp(-x ** 2),
        "gaussian",
    )


def cosine_gaussian1d(k=3.0):
    f = lambda x: np.exp(-x ** 2) * np.cos(k * x)
    def d2f(x):
        e = np.exp(-x ** 2)
        return e * ((4 * x ** 2 - 2 - k * k) * np.cos(k * x) + 4 * k * x * np.sin(k * x))
    return TestFunction1D(f, d2f, f"cos{k:g}-gaussian")


def lorentzian1d():
    f = lambda x: 1.0 / (1.0 + x ** 2)
    d2f = lambda x: (6 * x ** 2 - 2) / (1 + x ** 2) ** 3
    return TestFunction1D(f, d2f, "lorentzian")


def sech2_1d():
    f = lambda x: 1.0 / np.cosh(x) ** 2
    def d2f(x):
        s, c = np.sinh(x), np.cosh(x)
        return (4 * s ** 2 - 2) / c ** 4
    return TestFunction1D(f, d2f, "sech^2")


def wide_gaussian1d():
    return TestFunction1D(
        lambda x: np.exp(-0.25 * x ** 2) * (1 + 0.3 * x),
        lambda x: np.exp(-0.25 * x ** 2) * (0.25 * (x ** 2 * (1 + 0.3 * x)) - (1 + 0.3 * x) * 0.5 - 0.3 * x),
        "wide-gaussian",
    )


STANDARD_1D = [gaussian1d(), cosine_gaussian1d(), lorentzian1d(), sech2_1d(), wide_gaussian1d()]


def oracle_linear_1d(tf: TestFunction1D, x: float, sigma: float, mult: float = 1.0,
                     split: float = 1.0):
    """Adaptive quadrature of int delta(u,x;y) K(y) dy for K = (2-s) mult |y|^(-1-s).

    Returns (value, quad_error_estimate).
    """
    T = split ** (2.0 - sigma)

    def inner(t):
        y = t ** (1.0 / (2.0 - sigma))
        return 2.0 * mult * tf.delta_over_y2(x, y)

    v1, e1 = integrate.quad(inner, 0.0, T, limit=400)

    def outer(y):
        return 2.0 * (2.0 - sigma) * mult * tf.delta(x, y) * y ** (-1.0 - sigma)

    v2, e2 = integrate.quad(outer, split, np.inf, limit=400)
    return v1 + v2, e1 + e2


def oracle_extremal_1d(tf: TestFunction1D, x: float, sigma: float, lam: float,
                       plus: bool = True, split: float = 1.0):
    """Adaptive quadrature of the Pucci delta-split integral."""
    lp, lm = (lam, 1.0 / lam) if plus else (1.0 / lam, lam)

    def comb(d):
        return lp * max(d, 0.0) - lm * max(-d, 0.0)

    T = split ** (2.0 - sigma)

    def inner(t):
        y = t ** (1.0 / (2.0 - sigma))
        d2 = tf.delta_over_y2(x, y)
        return 2.0 * (lp * max(d2, 0.0) - lm * max(-d2, 0.0))

    v1, e1 = integrate.quad(inner, 0.0, T, limit=400)

    def outer(y):
        return 2.0 * (2.0 - sigma) * comb(tf.delta(x, y)) * y ** (-1.0 - sigma)

    v2, e2 = integrate.quad(outer, split, np.inf, limit=400)
    return v1 + v2, e1 + e2


class TestFunction2D:
    """Radial-ish analytic profile on R^2 with Hessian for the Taylor floor."""

    def __init__(self, f, hess, name):
        self.f, self.hess, self.name = f, hess, name

    def delta(self, x, y):
        r = np.hypot(y[0], y[1])
        if r < Y_FLOOR:
            H = self.hess(x)
            return 0.5 * (y @ H @ y)
        xp = (x[0] + y[0], x[1] + y[1])
        xm = (x[0] - y[0], x[1] - y[1])
        return 0.5 * (self.f(*xp) + self.f(*xm)) - self.f(*x)

    def delta_over_r2(self, x, om, r):
        """delta(x; r om) / r^2, Taylor value below the floor."""
        if r < Y_FLOOR:
            H = self.hess(x)
            return 0.5 * (om @ H @ om)
        return self.delta(x, r * om) / (r * r)


def gaussian2d():
    f = lambda a, b: np.exp(-(a * a + b * b))
    def hess(x):
        a, b = x
        e = np.exp(-(a * a + b * b))
        return np.array([[(4 * a * a - 2) * e, 4 * a * b * e], [4 * a * b * e, (4 * b * b - 2) * e]])
    return TestFunction2D(f, hess, "gaussian2d")


def anisotropic_gaussian2d():
    f = lambda a, b: np.exp(-(a * a + 0.5 * b * b)) * (1 + 0.2 * a)
    def hess(x):
        a, b = x
        eps = 1e-5
        H = np.zeros((2, 2))
        for i in range(2):
            for j in range(2):
                pp = list(x); pp[i] += eps; pp[j] += eps
                pm = list(x); pm[i] += eps; pm[j] -= eps
                mp = list(x); mp[i] -= eps; mp[j] += eps
                mm = list(x); mm[i] -= eps; mm[j] -= eps
                H[i, j] = (f(*pp) - f(*pm) - f(*mp) + f(*mm)) / (4 * eps * eps)
        return H
    return TestFunction2D(f, hess, "aniso-gaussian2d")


def lorentzian2d():
    f = lambda a, b: 1.0 / (1.0 + a * a + b * b) ** 1.5
    def hess(x):
        a, b = x
        q = 1.0 + a * a + b * b
        common = -3.0 * q ** -2.5
        return np.array([
            [common * (1 - 5 * a * a / q), common * (-5 * a * b / q)],
            [common * (-5 * a * b / q), common * (1 - 5 * b * b / q)],
        ])
    return TestFunction2D(f, hess, "lorentzian2d")


STANDARD_2D = [gaussian2d(), anisotropic_gaussian2d(), lorentzian2d()]


def _angular_values(fn, n_theta):
    theta = (np.arange(n_theta) + 0.5) * 2 * np.pi / n_theta
    return theta, 2 * np.pi / n_theta


def oracle_linear_2d(tf: TestFunction2D, x, sigma: float, mult: float = 1.0,
                     split: float = 1.0, n_theta: int = 128):
    """Polar adaptive quadrature (spectral trapezoid in angle) of delta * K."""
    x = np.asarray(x, dtype=float)
    theta, wth = _angular_values(tf, n_theta)
    oms = np.stack([np.cos(theta), np.sin(theta)], axis=-1)

    def ang(r):
        return sum(tf.delta(x, r * om) for om in oms) * wth

    T = split ** (2.0 - sigma)

    def inner(t):
        r = t ** (1.0 / (2.0 - sigma))
        return mult * sum(tf.delta_over_r2(x, om, r) for om in oms) * wth

    v1, e1 = integrate.quad(inner, 0.0, T, limit=200)

    # K r dr dtheta with K = (2-s) mult r^(-2-s): radial factor r^(-1-s)
    def outer(r):
        return (2.0 - sigma) * mult * ang(r) * r ** (-1.0 - sigma)

    v2, e2 = integrate.quad(outer, split, np.inf, limit=200)
    return v1 + v2, e1 + e2


def oracle_extremal_2d(tf: TestFunction2D, x, sigma: float, lam: float,
                       plus: bool = True, split: float = 1.0, n_theta: int = 128):
    x = np.asarray(x, dtype=float)
    lp, lm = (lam, 1.0 / lam) if plus else (1.0 / lam, lam)
    theta, wth = _angular_values(tf, n_theta)
    oms = np.stack([np.cos(theta), np.sin(theta)], axis=-1)

    def ang(r):
        tot = 0.0
        for om in oms:
            d = tf.delta(x, r * om)
            tot += lp * max(d, 0.0) - lm * max(-d, 0.0)
        return tot * wth

    T = split ** (2.0 - sigma)

    def inner(t):
        r = t ** (1.0 / (2.0 - sigma))
        tot = 0.0
        for om in oms:
            d2 = tf.delta_over_r2(x, om, r)
            tot += lp * max(d2, 0.0) - lm * max(-d2, 0.0)
        return tot * wth

    v1, e1 = integrate.quad(inner, 0.0, T, limit=200)

    def outer(r):
        return (2.0 - sigma) * ang(r) * r ** (-1.0 - sigma)

    v2, e2 = integrate.quad(outer, split, np.inf, limit=200)
    return v1 + v2, e1 + e2


def richardson_sigma_limit(values_by_sigma: dict) -> float:
    """Linear extrapolation in s = 2 - sigma of oracle values to sigma -> 2."""
    items = sorted(values_by_sigma.items(), key=lambda kv: 2.0 - kv[0])
    (s_small, v_small), (s_big, v_big) = (2 - items[0][0], items[0][1]), (2 - items[1][0], items[1][1])
    return (s_big * v_small - s_small * v_big) / (s_big - s_small)
