"""Mittag-Leffler series and the singular Gronwall envelope.

The envelope bounds the H^1_0 norm of the OU-subtracted solution on events
where the OU part stays small, using the singular Gronwall inequality with
kernel (t - s)^(-1/2) and the Mittag-Leffler resolvent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special as sp

__all__ = [
    "ConvergenceError",
    "NotApplicableError",
    "MlParams",
    "mittag_leffler",
    "mittag_leffler_derivative",
    "gronwall_kernel",
    "gronwall_bound",
    "singular_exp_integral",
    "h1_envelope",
    "Envelope",
]


class ConvergenceError(ArithmeticError):
    """Series did not reach the requested tolerance within max_terms."""


class NotApplicableError(ValueError):
    """The analytic estimate is vacuous for the given parameters."""


@dataclass(frozen=True)
class MlParams:
    beta: float = 0.5
    series_tol: float = 1e-16
    max_terms: int = 20000

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if not self.series_tol > 0:
            raise ValueError("series tolerance must be positive")


_LOG_MAX = math.log(np.finfo(float).max)


def _series(z, order: float, shift: float, power_offset: int, tol: float, max_terms: int):
    """sum_{n >= n0} c_n z^(n - power_offset) / Gamma(n*order + shift), z >= 0.

    With ``power_offset = 1`` the coefficients are ``n`` (term-wise derivative).
    Terms are positive, so the tail after a term whose successor ratio r < 1 is
    bounded by next / (1 - r) once the ratios decrease.
    """
    z = float(z)
    if z < 0 or not math.isfinite(z):
        raise ValueError("series argument must be finite and nonnegative")
    n0 = 1 if power_offset else 0
    if z == 0.0:
        if power_offset:
            return 1.0 / math.gamma(order + shift)
        return 1.0 / math.gamma(shift)
    logz = math.log(z)

    def log_term(n):
        lt = (n - power_offset) * logz - math.lgamma(n * order + shift)
        if power_offset:
            lt += math.log(n)
        return lt

    total = 0.0
    prev = None
    n = n0
    while n < n0 + max_terms:
        lt = log_term(n)
        if lt > _LOG_MAX:
            return math.inf
        term = math.exp(lt)
        total += term
        nxt = log_term(n + 1)
        ratio = math.exp(nxt - lt)
        # past the peak of the terms the ratios decrease monotonically
        if prev is not None and ratio < 1 and ratio <= prev:
            tail = math.exp(nxt) / (1 - ratio)
            if tail <= tol * total:
                return total
        prev = ratio
        n += 1
    raise ConvergenceError(
        f"Mittag-Leffler series at z={z} did not converge in {max_terms} terms"
    )


def mittag_leffler(z, order: float, series_tol: float = 1e-16, max_terms: int = 20000,
                   shift: float = 1.0, p: MlParams | None = None):
    """E_{order, shift}(z) = sum_n z^n / Gamma(n*order + shift) for z >= 0.

    ``order`` is 1 - beta in the Gronwall setting; ``order = 1`` gives exp(z).
    Accepts scalars or arrays; the tolerance is relative to the sum.  When
    ``p`` is given its tolerance and term cap take precedence.
    """
    if p is not None:
        series_tol, max_terms = p.series_tol, p.max_terms
    if not 0 < order <= 1:
        raise ValueError("order must lie in (0, 1]")
    zs = np.asarray(z, dtype=float)
    out = np.array([_series(x, order, shift, 0, series_tol, max_terms) for x in zs.ravel()])
    return out.reshape(zs.shape)[()] if zs.ndim == 0 else out.reshape(zs.shape)


def mittag_leffler_derivative(z, order: float, series_tol: float = 1e-16,
                              max_terms: int = 20000):
    """d/dz E_order(z), summed term-wise."""
    if not 0 < order <= 1:
        raise ValueError("order must lie in (0, 1]")
    zs = np.asarray(z, dtype=float)
    out = np.array([_series(x, order, 1.0, 1, series_tol, max_terms) for x in zs.ravel()])
    return out.reshape(zs.shape)[()] if zs.ndim == 0 else out.reshape(zs.shape)


def gronwall_kernel(r, L_const: float, beta: float, series_tol: float = 1e-16):
    """K(r) = d/dr E_{1-beta}(L Gamma(1-beta) r^(1-beta)), r > 0.

    Equals sum_{n>=1} (L Gamma(1-beta))^n r^(n(1-beta)-1) / Gamma(n(1-beta)).
    """
    rho = 1.0 - beta
    c = L_const * math.gamma(rho)
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise ValueError("kernel is singular at r = 0")
    z = c * r**rho
    # d/dr E(c r^rho) = E'(z) * c * rho * r^(rho - 1)
    return mittag_leffler_derivative(z, rho, series_tol) * c * rho * r ** (rho - 1)


def gronwall_bound(a, L_const: float, beta: float, t_grid, nondecreasing: bool | None = None,
                   series_tol: float = 1e-16):
    """Upper bound for f solving f(t) <= a(t) + L int_0^t (t-s)^(-beta) f(s) ds.

    Parameters
    ----------
    a : array_like
        Nonnegative forcing sampled on ``t_grid`` (uniform or not, starting at 0).
    nondecreasing : bool, optional
        Use the closed form a(t) E_{1-beta}(L Gamma(1-beta) t^(1-beta)).  By
        default it is used whenever ``a`` is nondecreasing on the grid.

    Notes
    -----
    The general form a(t) + int_0^t K(t-s) a(s) ds is evaluated by product
    integration: ``a`` is interpolated linearly between grid points and the
    weights are integrated exactly through the antiderivatives E_{rho,1} and
    E_{rho,2} of the kernel, so the weak singularity of K costs no accuracy.
    """
    a = np.asarray(a, dtype=float)
    t = np.asarray(t_grid, dtype=float)
    if a.shape != t.shape:
        raise ValueError("forcing and time grid must have the same shape")
    if np.any(a < 0):
        raise ValueError("forcing must be nonnegative")
    if L_const < 0:
        raise ValueError("Gronwall constant must be nonnegative")
    if not 0 <= beta < 1:
        raise ValueError("beta must lie in [0, 1)")
    if L_const == 0:
        return a.copy()
    rho = 1.0 - beta
    c = L_const * math.gamma(rho)
    if nondecreasing is None:
        nondecreasing = bool(np.all(np.diff(a) >= 0))
    if nondecreasing:
        return a * mittag_leffler(c * t**rho, rho, series_tol)

    def E1(r):
        return mittag_leffler(c * r**rho, rho, series_tol)

    def E2(r):
        # int_0^r E(c x^rho) dx = r E_{rho,2}(c r^rho)
        return r * mittag_leffler(c * r**rho, rho, series_tol, shift=2.0)

    out = a.copy()
    for m in range(1, t.size):
        tm = t[m]
        r = tm - t[: m + 1]  # decreasing to 0
        e1 = E1(r)
        e2 = E2(r)
        total = 0.0
        for j in range(m):
            h = t[j + 1] - t[j]
            # int_{s_j}^{s_j+1} K(tm - s) ds and int K(tm - s)(s - s_j) ds
            w0 = e1[j] - e1[j + 1]
            w1 = -h * e1[j + 1] + (e2[j] - e2[j + 1])
            slope = (a[j + 1] - a[j]) / h
            total += a[j] * w0 + slope * w1
        out[m] = a[m] + total
    return out


def singular_exp_integral(mu: float, t: float, n_nodes: int = 64) -> float:
    """int_0^t e^(mu s) (t - s)^(-1/2) ds via the substitution s = t - r^2.

    The substitution turns it into 2 int_0^sqrt(t) e^(mu (t - r^2)) dr, which
    is smooth and handled by Gauss-Legendre quadrature.
    """
    if t <= 0:
        return 0.0
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    b = math.sqrt(t)
    r = 0.5 * b * (x + 1)
    return float(b * np.sum(w * np.exp(mu * (t - r * r))))


@dataclass(frozen=True)
class Envelope:
    times: np.ndarray
    total: np.ndarray
    initial: np.ndarray
    forcing: np.ndarray
    resolvent: np.ndarray
    lipschitz_l: float
    eta: float
    mu: float


def _resolvent_integral(mu: float, t: float, c: float, tol: float = 1e-16, max_terms: int = 5000):
    """sum_{m>=2} c^m / Gamma(m/2) int_0^t r^(m/2 - 1) e^(mu (t - r)) dr.

    Each integral is e^(mu t) mu^(-m/2) gamma_lower(m/2, mu t); the regularized
    incomplete gamma keeps the terms bounded.
    """
    if t <= 0 or c == 0:
        return 0.0
    x = mu * t
    total = 0.0
    log_c = math.log(c)
    for m in range(2, max_terms):
        a = m / 2
        # c^m mu^(-a) P(a, x) Gamma(a) / Gamma(a) = c^m mu^(-a) P(a, x)
        log_term = m * log_c - a * math.log(mu) + math.log(max(sp.gammainc(a, x), 1e-320))
        term = math.exp(log_term)
        total += term
        if m > 2 * (c * c * t + 4) and term <= tol * total:
            return math.exp(x) * total
    raise ConvergenceError("resolvent series did not converge")


def h1_envelope(u0_norm: float, eta: float, lipschitz_l: float, mu: float, t_grid,
                p: MlParams | None = None) -> Envelope:
    """Analytic bound on ||u~(t)||_V for the OU-subtracted random PDE.

    With c = l Gamma(1/2) and I(t) = int_0^t e^(mu s)(t-s)^(-1/2) ds,

        ||u~(t)||_V <= e^(-mu t) [ ||u~_0|| E_{1/2}(c t^(1/2))
                                    + l eta I(t)
                                    + eta int_0^t e^(mu s) K2(t-s) ds ],

    where K2(r) = sum_{m>=2} c^m r^(m/2-1) / Gamma(m/2) is the Gronwall
    resolvent kernel without its leading singular term.  Requires
    mu = lambda_1 - alpha > 0.
    """
    p = p or MlParams(0.5)
    if not mu > 0:
        raise NotApplicableError("envelope needs mu = lambda_1 - alpha > 0")
    if eta < 0 or u0_norm < 0 or lipschitz_l < 0:
        raise ValueError("norms and Lipschitz constant must be nonnegative")
    t = np.asarray(t_grid, dtype=float)
    c = lipschitz_l * math.gamma(0.5)
    initial = u0_norm * mittag_leffler(c * np.sqrt(t), 0.5, p.series_tol, p.max_terms)
    forcing = lipschitz_l * eta * np.array([singular_exp_integral(mu, s) for s in t])
    if eta == 0 or c == 0:
        resolvent = np.zeros_like(t)
    else:
        resolvent = eta * np.array([_resolvent_integral(mu, s, c) for s in t])
    damp = np.exp(-mu * t)
    return Envelope(t, damp * (initial + forcing + resolvent), damp * initial, damp * forcing,
                    damp * resolvent, lipschitz_l, eta, mu)
