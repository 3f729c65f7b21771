"""Time stepping for the stochastic Chafee-Infante equation.

Three equations share one set of propagators:

* the SPDE      du = (Lap u + alpha u - u^3) dt + dW,
* the random PDE for u - z, with z the OU process (no stochastic forcing),
* the first-variation equation dv = (Lap v + alpha v - 3 u^2 v) dt.

The array-level helpers (``Stepper``) operate on the last axis and broadcast
over leading axes, so ensembles and tangent frames are stepped in one call.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .noise import NoisePath
from .spectral import DomainSpec, SpectralBasis, SpectralField, basis_for

__all__ = [
    "Scheme",
    "SolverConfig",
    "BlowUpError",
    "TrajectoryRecord",
    "Stepper",
    "cutoff_weight",
    "step_spde",
    "step_random_pde",
    "step_variational",
    "integrate",
    "BLOWUP_THRESHOLD",
]

BLOWUP_THRESHOLD = 1e6


class Scheme(str, enum.Enum):
    EXPONENTIAL_EULER = "ExponentialEuler"
    SEMI_IMPLICIT_EULER = "SemiImplicitEuler"


class BlowUpError(FloatingPointError):
    """State left the admissible range (non-finite or ||u||_H > 1e6)."""

    def __init__(self, message: str, time: float | None = None):
        super().__init__(message if time is None else f"{message} at t={time:g}")
        self.time = time


@dataclass(frozen=True)
class SolverConfig:
    """Step size, bifurcation parameter, scheme and optional V-ball cut-off.

    ``cutoff_radius=0`` is the degenerate limit of the cut-off, where the
    nonlinearity vanishes identically and the equations become linear.
    """

    dt: float = 1e-3
    alpha: float = 1.0
    scheme: Scheme = Scheme.EXPONENTIAL_EULER
    cutoff_radius: float | None = None

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"time step must be positive, got {self.dt}")
        if not math.isfinite(self.alpha):
            raise ValueError("alpha must be finite")
        if self.cutoff_radius is not None and not self.cutoff_radius >= 0:
            raise ValueError("cut-off radius must be nonnegative")
        object.__setattr__(self, "scheme", Scheme(self.scheme))

    @property
    def linear(self) -> bool:
        return self.cutoff_radius == 0

    def with_dt(self, dt: float) -> SolverConfig:
        return SolverConfig(dt, self.alpha, self.scheme, self.cutoff_radius)

    def with_alpha(self, alpha: float) -> SolverConfig:
        return SolverConfig(self.dt, alpha, self.scheme, self.cutoff_radius)


def cutoff_weight(r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """C^1 ramp theta(r) and its derivative: 1 for r <= 1, 0 for r >= 2."""
    s = np.clip(np.asarray(r, dtype=float) - 1.0, 0.0, 1.0)
    theta = 1.0 - 3 * s**2 + 2 * s**3
    dtheta = -6 * s + 6 * s**2
    return theta, dtheta


class Stepper:
    """Precomputed propagators for one (domain, config) pair."""

    def __init__(self, domain: DomainSpec, cfg: SolverConfig):
        self.domain = domain
        self.cfg = cfg
        self.basis: SpectralBasis = basis_for(domain)
        lam = self.basis.lam
        a = (cfg.alpha - lam) * cfg.dt
        self.decay = np.exp(a)
        with np.errstate(divide="ignore", invalid="ignore"):
            phi1 = np.where(a == 0, 1.0, np.expm1(a) / a)
        self.phi1_dt = phi1 * cfg.dt
        self.implicit = 1.0 / (1.0 + cfg.dt * (lam - cfg.alpha))

    @cached_property
    def exponential(self) -> bool:
        return self.cfg.scheme is Scheme.EXPONENTIAL_EULER

    # -- nonlinearity -------------------------------------------------------

    def _theta(self, u: np.ndarray):
        R = self.cfg.cutoff_radius
        r = self.basis.v_norm(u) / R
        theta, dtheta = cutoff_weight(r)
        return theta[..., None], dtheta[..., None], r[..., None]

    def nonlinearity(self, u: np.ndarray) -> np.ndarray:
        """f(u) = -u^3, or the cut-off version -theta(||u||_V / R) u^3."""
        if self.cfg.linear:
            return np.zeros_like(u)
        f = -self.basis.cubic(u)
        if self.cfg.cutoff_radius is None:
            return f
        theta, _, _ = self._theta(u)
        # exactly -u^3 inside the ball so cut-off and raw runs agree bitwise
        return np.where(theta == 1.0, f, theta * f)

    def nonlinearity_derivative(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Df(u) v for u of shape (..., N) and v of shape (..., k, N)."""
        if self.cfg.linear:
            return np.zeros_like(v)
        basis = self.basis
        ug = basis.to_grid(u)[..., None, :]
        dv = -3.0 * basis.from_grid(ug * ug * basis.to_grid(v))
        if self.cfg.cutoff_radius is None:
            return dv
        theta, dtheta, r = self._theta(u)
        theta, dtheta, r = theta[..., None], dtheta[..., None], r[..., None]
        R = self.cfg.cutoff_radius
        out = np.where(theta == 1.0, dv, theta * dv)
        # d theta(||u||_V / R) = theta' / (R ||u||_V) <u, v>_V
        active = (dtheta != 0.0) & (r > 0)
        if np.any(active):
            lam = basis.lam
            uv = np.sum(lam * u[..., None, :] * v, axis=-1, keepdims=True)
            with np.errstate(divide="ignore", invalid="ignore"):
                coef = np.where(active, dtheta / (R * R * r), 0.0) * uv
            out = out - coef * basis.cubic(u)[..., None, :]
        return out

    # -- steps ---------------------------------------------------------------

    def linear_step(self, u: np.ndarray, forcing: np.ndarray, noise=None) -> np.ndarray:
        if self.exponential:
            out = self.decay * u + self.phi1_dt * forcing
            if noise is not None:
                out = out + self.decay * noise
            return out
        rhs = u + self.cfg.dt * forcing
        if noise is not None:
            rhs = rhs + noise
        return self.implicit * rhs

    def spde(self, u: np.ndarray, dW: np.ndarray) -> np.ndarray:
        return self.linear_step(u, self.nonlinearity(u), dW)

    def random_pde(self, ut: np.ndarray, z: np.ndarray) -> np.ndarray:
        return self.linear_step(ut, self.nonlinearity(ut + z))

    def variational(self, v: np.ndarray, u_base: np.ndarray) -> np.ndarray:
        """Tangent step: exact derivative of :meth:`spde` with respect to u."""
        return self.linear_step(v, self.nonlinearity_derivative(u_base, v))

    def check(self, u: np.ndarray, t: float | None = None) -> None:
        if not np.all(np.isfinite(u)):
            raise BlowUpError("non-finite state", t)
        if np.max(self.basis.h_norm(u), initial=0.0) > BLOWUP_THRESHOLD:
            raise BlowUpError(f"||u||_H exceeded {BLOWUP_THRESHOLD:g}", t)

    def evolve(self, u0: np.ndarray, dW: np.ndarray, t0: float = 0.0,
               record: bool = True, check_every: int = 1) -> np.ndarray:
        """Run the SPDE over ``dW`` (shape (steps, ..., N), broadcast against u0).

        Returns all states (steps + 1, ...) when ``record`` else the final state.
        """
        u = np.array(u0, dtype=float)
        n = dW.shape[0]
        out = np.empty((n + 1,) + u.shape) if record else None
        if record:
            out[0] = u
        dt = self.cfg.dt
        for i in range(n):
            u = self.spde(u, dW[i])
            if (i + 1) % check_every == 0 or i + 1 == n:
                self.check(u, t0 + (i + 1) * dt)
            if record:
                out[i + 1] = u
        return out if record else u


_STEPPERS: dict[tuple[DomainSpec, SolverConfig], Stepper] = {}


def stepper_for(domain: DomainSpec, cfg: SolverConfig) -> Stepper:
    key = (domain, cfg)
    st = _STEPPERS.get(key)
    if st is None:
        if len(_STEPPERS) > 64:
            _STEPPERS.clear()
        st = _STEPPERS.setdefault(key, Stepper(domain, cfg))
    return st


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    """States of one trajectory on a uniform time grid."""

    times: np.ndarray
    states: np.ndarray
    domain: DomainSpec
    v_norms: np.ndarray = field(init=False)

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        states.setflags(write=False)
        object.__setattr__(self, "states", states)
        v = basis_for(self.domain).v_norm(states)
        v.setflags(write=False)
        object.__setattr__(self, "v_norms", v)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    @property
    def final(self) -> SpectralField:
        return SpectralField(self.states[-1], self.domain)

    def state(self, i: int) -> SpectralField:
        return SpectralField(self.states[i], self.domain)

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time", "mode", "coefficient"])
            for t, row in zip(self.times, self.states):
                for mode, c in enumerate(row, start=1):
                    writer.writerow([repr(float(t)), mode, repr(float(c))])

    def save(self, path) -> None:
        np.savez(path, times=self.times, states=self.states, L=self.domain.L,
                 N=self.domain.N, basis=self.domain.basis_convention.value)

    @classmethod
    def load(cls, path) -> TrajectoryRecord:
        with np.load(path) as data:
            domain = DomainSpec(float(data["L"]), int(data["N"]), str(data["basis"]))
            return cls(data["times"], data["states"], domain)


def step_spde(u: SpectralField, dW, cfg: SolverConfig) -> SpectralField:
    st = stepper_for(u.domain, cfg)
    out = st.spde(u.coeffs, np.asarray(dW, dtype=float))
    st.check(out)
    return SpectralField(out, u.domain)


def step_random_pde(ut: SpectralField, z, cfg: SolverConfig) -> SpectralField:
    """One deterministic step of d u~ = (Lap + alpha) u~ dt + f(u~ + z) dt."""
    z = z.z if hasattr(z, "z") else z
    st = stepper_for(ut.domain, cfg)
    out = st.random_pde(ut.coeffs, z.coeffs)
    st.check(out)
    return SpectralField(out, ut.domain)


def step_variational(v: SpectralField, u_base: SpectralField, cfg: SolverConfig) -> SpectralField:
    st = stepper_for(v.domain, cfg)
    out = st.variational(v.coeffs[None, :], u_base.coeffs)[0]
    st.check(out)
    return SpectralField(out, v.domain)


def integrate(u0: SpectralField, path: NoisePath, t0: float, t1: float,
              cfg: SolverConfig) -> TrajectoryRecord:
    """Integrate the SPDE over [t0, t1] driven by the increments of ``path``."""
    if not math.isclose(path.dt, cfg.dt, rel_tol=1e-12):
        raise ValueError(f"path step {path.dt} differs from solver step {cfg.dt}")
    dW = path.window(t0, t1)
    if dW.shape[1] != u0.domain.N:
        raise ValueError("noise path and field have different numbers of modes")
    st = stepper_for(u0.domain, cfg)
    states = st.evolve(u0.coeffs, dW, t0)
    times = t0 + cfg.dt * np.arange(dW.shape[0] + 1)
    return TrajectoryRecord(times, states, u0.domain)
