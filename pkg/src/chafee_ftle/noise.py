"""Trace-class Q-Wiener increments, the Wiener shift and the OU process.

Increments are drawn from counter-based Philox streams keyed by
``(seed, mode)``; the step axis is cut into fixed blocks whose index sits in
the counter.  A given increment therefore depends only on
``(seed, mode, step index)``, so extending a path into the past or future
never perturbs increments that were already sampled.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .spectral import DomainSpec, SpectralField

__all__ = [
    "ConfigurationError",
    "CovarianceSpec",
    "NoisePath",
    "PathSource",
    "RefinedSource",
    "derive_seed",
    "OuState",
    "sample_path",
    "wiener_shift",
    "ou_step",
    "ou_path",
]

BLOCK = 1024
_U64 = 1 << 64
_SIGN_OFFSET = 1 << 63


class ConfigurationError(ValueError):
    """Invalid noise or experiment configuration."""


def _steps(t: float, dt: float) -> int:
    n = round(t / dt)
    if not math.isclose(n * dt, t, rel_tol=1e-9, abs_tol=1e-9 * dt):
        raise ValueError(f"time {t} is not a multiple of dt={dt}")
    return n


@dataclass(frozen=True, eq=False)
class CovarianceSpec:
    """Eigenvalues q_k of the covariance operator Q in the sine basis.

    Parameters
    ----------
    q : array_like
        Nonnegative eigenvalues, one per retained mode.
    gamma : float, optional
        Decay exponent when built by :meth:`power_law`; informational.
    epsilon : float
        Exponent slack in the discrete trace check.
    """

    q: np.ndarray
    gamma: float | None = None
    epsilon: float = 0.01

    def __post_init__(self):
        q = np.array(self.q, dtype=float)
        if q.ndim != 1:
            raise ConfigurationError("covariance eigenvalues must be one-dimensional")
        if not np.all(np.isfinite(q)) or np.any(q < 0):
            raise ConfigurationError("covariance eigenvalues must be finite and >= 0")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    @classmethod
    def power_law(
        cls, domain: DomainSpec, gamma: float = 1.0, amplitude: float = 1.0, epsilon: float = 0.01
    ) -> CovarianceSpec:
        """q_k = amplitude^2 * lambda_k^(-gamma)."""
        if gamma < 0:
            raise ConfigurationError("decay exponent must be nonnegative")
        q = amplitude**2 * domain.eigenvalues() ** (-float(gamma))
        return cls(q, gamma=float(gamma), epsilon=epsilon)

    @classmethod
    def zero(cls, domain: DomainSpec) -> CovarianceSpec:
        return cls(np.zeros(domain.N))

    @property
    def sqrt_q(self) -> np.ndarray:
        return np.sqrt(self.q)

    def trace_weights(self, domain: DomainSpec) -> np.ndarray:
        return self.q * domain.eigenvalues() ** self.epsilon

    def validate(self, domain: DomainSpec) -> None:
        """Raise ConfigurationError unless the discrete trace condition holds.

        The condition is ``sum q_k lambda_k^eps < inf`` together with a tail
        check: modes above N/2 carry at most 1% of the weighted trace.
        """
        if self.q.shape != (domain.N,):
            raise ConfigurationError(
                f"covariance has {self.q.size} eigenvalues, domain has {domain.N} modes"
            )
        w = self.trace_weights(domain)
        total = float(np.sum(w))
        if not math.isfinite(total):
            raise ConfigurationError("weighted trace is not finite")
        tail = float(np.sum(w[domain.N // 2 :]))
        if total > 0 and tail > 0.01 * total:
            raise ConfigurationError(
                f"covariance tail beyond N/2 holds {tail / total:.3%} of the weighted "
                "trace (limit 1%); increase N or the decay exponent"
            )


def _mode_block(seed: int, mode: int, block: int) -> np.ndarray:
    key = (int(seed) % _U64) | (int(mode) << 64)
    counter = np.array([0, (block + _SIGN_OFFSET) % _U64, 0, 0], dtype=np.uint64)
    gen = np.random.Generator(np.random.Philox(key=key, counter=counter))
    return gen.standard_normal(BLOCK)


def standard_normals(seed: int, n_modes: int, i_min: int, i_max: int, active=None) -> np.ndarray:
    """Standard normal draws for steps ``i_min <= i < i_max``, shape (steps, modes)."""
    n = i_max - i_min
    out = np.zeros((n, n_modes))
    if n <= 0:
        return out
    b_lo = i_min // BLOCK
    b_hi = (i_max - 1) // BLOCK
    for mode in range(n_modes):
        if active is not None and not active[mode]:
            continue
        for b in range(b_lo, b_hi + 1):
            lo = max(i_min, b * BLOCK)
            hi = min(i_max, (b + 1) * BLOCK)
            z = _mode_block(seed, mode + 1, b)
            out[lo - i_min : hi - i_min, mode] = z[lo - b * BLOCK : hi - b * BLOCK]
    return out


@dataclass(frozen=True, eq=False)
class NoisePath:
    """Per-mode Wiener increments on a uniform two-sided time grid.

    Row ``j`` of ``increments`` is the increment over
    ``[(i_min + j) dt, (i_min + j + 1) dt]``.
    """

    dt: float
    i_min: int
    increments: np.ndarray
    seed: int | None = None
    cov: CovarianceSpec | None = field(default=None, repr=False)

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim != 2:
            raise ValueError("increments must have shape (steps, modes)")
        if inc.flags.writeable:
            # shifted paths share the parent's read-only buffer; copy only fresh input
            inc = inc.copy()
            inc.setflags(write=False)
        object.__setattr__(self, "increments", inc)

    @property
    def n_steps(self) -> int:
        return self.increments.shape[0]

    @property
    def n_modes(self) -> int:
        return self.increments.shape[1]

    @property
    def i_max(self) -> int:
        return self.i_min + self.n_steps

    @property
    def t_min(self) -> float:
        return self.i_min * self.dt

    @property
    def t_max(self) -> float:
        return self.i_max * self.dt

    def step_index(self, t: float) -> int:
        return _steps(t, self.dt)

    def window(self, t0: float, t1: float) -> np.ndarray:
        """Increments covering [t0, t1], shape (steps, modes)."""
        i0, i1 = _steps(t0, self.dt), _steps(t1, self.dt)
        if i0 < self.i_min or i1 > self.i_max or i1 < i0:
            raise IndexError(
                f"window [{t0}, {t1}] outside path extent [{self.t_min}, {self.t_max}]"
            )
        return self.increments[i0 - self.i_min : i1 - self.i_min]

    def value(self, t: float) -> np.ndarray:
        """W_t - W_0 for t inside the path extent."""
        if t >= 0:
            return np.sum(self.window(0.0, t), axis=0)
        return -np.sum(self.window(t, 0.0), axis=0)

    def coarsen(self, factor: int) -> NoisePath:
        """Sum groups of ``factor`` consecutive increments (time step factor*dt)."""
        if factor == 1:
            return self
        if self.i_min % factor or self.n_steps % factor:
            raise ValueError("path extent is not aligned with the coarsening factor")
        inc = self.increments.reshape(-1, factor, self.n_modes).sum(axis=1)
        return NoisePath(self.dt * factor, self.i_min // factor, inc, self.seed, self.cov)

    # -- audit dumps ---------------------------------------------------------

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "mode", "increment"])
            for j, row in enumerate(self.increments):
                for mode, x in enumerate(row, start=1):
                    writer.writerow([self.i_min + j, mode, repr(float(x))])

    @classmethod
    def from_csv(cls, path, dt: float) -> NoisePath:
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        steps = rows[:, 0].astype(np.int64)
        modes = rows[:, 1].astype(np.int64)
        i_min = int(steps.min())
        inc = np.zeros((int(steps.max()) - i_min + 1, int(modes.max())))
        inc[steps - i_min, modes - 1] = rows[:, 2]
        return cls(dt, i_min, inc)

    def save(self, path) -> None:
        np.savez(
            Path(path),
            dt=self.dt,
            i_min=self.i_min,
            increments=self.increments,
            seed=-1 if self.seed is None else self.seed,
        )

    @classmethod
    def load(cls, path) -> NoisePath:
        with np.load(Path(path)) as data:
            seed = int(data["seed"])
            return cls(float(data["dt"]), int(data["i_min"]), data["increments"],
                       None if seed < 0 else seed)


def sample_path(cov: CovarianceSpec, dt: float, t_min: float, t_max: float, seed: int,
                domain: DomainSpec | None = None) -> NoisePath:
    """Sample increments dW_k ~ Normal(0, q_k dt) on [t_min, t_max].

    Raises
    ------
    ConfigurationError
        If the covariance violates the discrete trace condition (checked when
        ``domain`` is given) or the extent is not two-sided.
    """
    if not dt > 0:
        raise ConfigurationError("time step must be positive")
    if not t_min <= 0 <= t_max:
        raise ConfigurationError("path extent must contain t = 0")
    if domain is not None:
        cov.validate(domain)
    i_min, i_max = _steps(t_min, dt), _steps(t_max, dt)
    z = standard_normals(seed, cov.q.size, i_min, i_max, active=cov.q > 0)
    return NoisePath(dt, i_min, z * (cov.sqrt_q * math.sqrt(dt)), seed, cov)


def derive_seed(root: int, *index: int) -> int:
    """64-bit seed for member ``index`` of an ensemble rooted at ``root``."""
    ss = np.random.SeedSequence([int(root) % _U64, *(int(i) for i in index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True, eq=False)
class PathSource:
    """Unbounded noise path generated on demand.

    ``window`` returns exactly the increments :func:`sample_path` would
    produce for the same seed, for any time range, without materializing
    the whole path.
    """

    cov: CovarianceSpec
    dt: float
    seed: int

    def window(self, t0: float, t1: float) -> np.ndarray:
        i0, i1 = _steps(t0, self.dt), _steps(t1, self.dt)
        if i1 < i0:
            raise IndexError(f"empty window [{t0}, {t1}]")
        z = standard_normals(self.seed, self.cov.q.size, i0, i1, active=self.cov.q > 0)
        return z * (self.cov.sqrt_q * math.sqrt(self.dt))

    def path(self, t_min: float, t_max: float) -> NoisePath:
        return sample_path(self.cov, self.dt, t_min, t_max, self.seed)

    def refined(self) -> RefinedSource:
        """Same path at step dt/2, filled in by Brownian bridges."""
        return RefinedSource(self)


@dataclass(frozen=True, eq=False)
class RefinedSource:
    """Halved-step version of a path source.

    Each coarse increment S over [t, t + dt] is split as S/2 + Z, S/2 - Z with
    Z ~ Normal(0, q dt/4) drawn from an independent stream, so summing
    consecutive pairs gives back the coarse path exactly (up to rounding).
    """

    parent: PathSource | RefinedSource

    @property
    def dt(self) -> float:
        return self.parent.dt / 2

    @property
    def cov(self) -> CovarianceSpec:
        return self.parent.cov

    @property
    def seed(self) -> int:
        return derive_seed(self.parent.seed, 0xB41D)

    def window(self, t0: float, t1: float) -> np.ndarray:
        c0 = math.floor(t0 / self.parent.dt + 1e-9)
        c1 = math.ceil(t1 / self.parent.dt - 1e-9)
        coarse = self.parent.window(c0 * self.parent.dt, c1 * self.parent.dt)
        z = standard_normals(self.seed, self.cov.q.size, c0, c1, active=self.cov.q > 0)
        z = z * (self.cov.sqrt_q * math.sqrt(self.parent.dt) / 2)
        fine = np.empty((2 * coarse.shape[0], coarse.shape[1]))
        fine[0::2] = coarse / 2 + z
        fine[1::2] = coarse / 2 - z
        i0 = _steps(t0, self.dt) - 2 * c0
        i1 = _steps(t1, self.dt) - 2 * c0
        return fine[i0:i1]

    def refined(self) -> RefinedSource:
        return RefinedSource(self)


def wiener_shift(path: NoisePath, t: float) -> NoisePath:
    """The shifted path theta^t: increment at step i is the original at i + t/dt."""
    m = _steps(t, path.dt)
    if not path.i_min <= m <= path.i_max:
        raise IndexError(f"shift {t} moves time 0 outside [{path.t_min}, {path.t_max}]")
    return NoisePath(path.dt, path.i_min - m, path.increments, path.seed, path.cov)


@dataclass(frozen=True, eq=False)
class OuState:
    """Value of the Ornstein-Uhlenbeck process dz = (Laplacian + alpha) z dt + dW."""

    z: SpectralField
    alpha: float

    def stationary_variance(self, cov: CovarianceSpec) -> np.ndarray:
        lam = self.z.domain.eigenvalues()
        if np.any(lam <= self.alpha):
            raise ConfigurationError("stationary OU requires lambda_k > alpha for all modes")
        return cov.q / (2 * (lam - self.alpha))


def _ou_factors(lam: np.ndarray, dt: float, alpha: float, exact_variance: bool):
    a = (alpha - lam) * dt
    decay = np.exp(a)
    if not exact_variance:
        return decay, decay
    # sqrt of (e^{2a} - 1) / (2a), the exact conditional std per unit increment std
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = np.sqrt(np.where(a == 0, 1.0, np.expm1(2 * a) / (2 * a)))
    return decay, gain


def ou_step(state: OuState, dW: np.ndarray, dt: float, alpha: float | None = None,
            exact_variance: bool = False) -> OuState:
    """Advance the OU process one step, mode by mode.

    The default (left-point) form multiplies the increment by e^{(alpha-lambda_k)dt},
    matching the exponential Euler treatment of the SPDE.  ``exact_variance``
    rescales it so that the update is exact in distribution.
    """
    alpha = state.alpha if alpha is None else alpha
    lam = state.z.domain.eigenvalues()
    decay, gain = _ou_factors(lam, dt, alpha, exact_variance)
    z = decay * state.z.coeffs + gain * np.asarray(dW)
    return OuState(SpectralField(z, state.z.domain), alpha)


def ou_path(path: NoisePath, t0: float, t1: float, alpha: float, domain: DomainSpec,
            z0: np.ndarray | None = None, exact_variance: bool = False) -> np.ndarray:
    """OU values on the grid of [t0, t1] started from z0 (zero by default).

    Returns an array of shape (steps + 1, N).
    """
    dW = path.window(t0, t1)
    decay, gain = _ou_factors(domain.eigenvalues(), path.dt, alpha, exact_variance)
    out = np.empty((dW.shape[0] + 1, domain.N))
    out[0] = 0.0 if z0 is None else z0
    for i, inc in enumerate(dW):
        out[i + 1] = decay * out[i] + gain * inc
    return out
