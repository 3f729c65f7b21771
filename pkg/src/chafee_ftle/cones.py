"""Cone quadratic forms and numerical certification of cone growth.

For a multiplier B = -3 u^2 that is small in V, tangent vectors that start
in the cone around e_1 (or, on the k-th wedge power, around the leading
blade e_1 ^ ... ^ e_k) stay there and grow at a rate close to
alpha - lambda_1 (resp. the sum of the first k rates).  This module evaluates
the forms, picks admissible cone openings, and checks the differential
inequality along computed tangent trajectories.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dynamics import SolverConfig, TrajectoryRecord, stepper_for
from .exterior import WedgeIndex, WedgeVector
from .lyapunov import propagate_frames
from .spectral import DomainSpec, SpectralField, basis_for

__all__ = [
    "ConeParams",
    "ConeCertificate",
    "InitialConeViolation",
    "q_delta",
    "q_delta_k",
    "admissible_delta",
    "certify_cone_growth",
    "multiplier_v_norm",
    "sobolev_constant",
    "span_sobolev_constant",
    "event_level_for",
    "DELTA_GRID",
]

DELTA_GRID = tuple(2.0**-j for j in range(0, 41))


class InitialConeViolation(ValueError):
    """The initial vector (or blade) is not strictly inside the cone."""


@dataclass(frozen=True)
class ConeParams:
    """Cone opening, grade, safety factor and multiplier smallness.

    ``epsilon`` bounds sup_t ||3 u(t)^2||_V.  ``coupled`` marks the k = 1
    parametrization delta = sqrt(epsilon), for which the certified rate is
    alpha - lambda_1 - 2 delta.
    """

    delta: float
    k: int = 1
    M: float = 2.0
    epsilon: float = 0.0
    coupled: bool = False

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.k < 1:
            raise ValueError("grade must be >= 1")
        if not self.M > 1:
            raise ValueError("safety factor M must exceed 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.coupled and (self.k != 1 or not math.isclose(self.delta, math.sqrt(self.epsilon))):
            raise ValueError("coupled parameters need k = 1 and delta = sqrt(epsilon)")

    @classmethod
    def from_epsilon(cls, epsilon: float, M: float = 2.0) -> ConeParams:
        """k = 1 cone with delta = sqrt(epsilon)."""
        return cls(math.sqrt(epsilon), 1, M, epsilon, coupled=True)


def q_delta(v: SpectralField | np.ndarray, delta: float) -> float | np.ndarray:
    """delta ||pi_1 v||^2 - ||(1 - pi_1) v||^2 (last axis holds coefficients)."""
    c = v.coeffs if isinstance(v, SpectralField) else np.asarray(v, dtype=float)
    lead = c[..., 0] ** 2
    return delta * lead - (np.sum(c * c, axis=-1) - lead)


def q_delta_k(v: WedgeVector, delta: float, k: int) -> float:
    """delta v_{i0}^2 - sum_{i != i0} v_i^2 with i0 = (1, ..., k)."""
    if v.k != k:
        raise ValueError(f"wedge vector has grade {v.k}, expected {k}")
    lead = v[WedgeIndex.leading(k)] ** 2
    return delta * lead - (v.norm_squared() - lead)


def admissible_delta(alpha: float, k: int, epsilon: float, d: DomainSpec) -> float | None:
    """Largest delta on the grid 2^-j with eps(1+delta)k <= gap - eps(1+delta)k/delta.

    ``gap`` is lambda_{k+1} - lambda_k, the smallest difference between the
    leading wedge rate and any other.  ``epsilon`` is the operator-norm bound
    of the multiplier in H.
    """
    lam = d.eigenvalues()
    if k >= d.N:
        raise ValueError(f"grade {k} needs at least {k + 1} modes")
    if not alpha > lam[k - 1]:
        raise ValueError(f"alpha = {alpha} must exceed lambda_{k} = {lam[k - 1]}")
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    gap = lam[k] - lam[k - 1]
    for delta in DELTA_GRID:
        lhs = epsilon * (1 + delta) * k
        if lhs <= gap - lhs / delta:
            return delta
    return None


def sobolev_constant(domain: DomainSpec) -> float:
    """Sharp constant C in sup|f| <= C ||f'||_{L^2} on H^1_0(0, L): sqrt(L)/2."""
    return math.sqrt(domain.L) / 2


def span_sobolev_constant(domain: DomainSpec, refine: int = 8) -> float:
    """sup_x sqrt(sum_k e_k(x)^2 / lambda_k): sup|u| <= C ||u||_V on the retained span."""
    n = refine * (2 * domain.N + 2)
    x = np.arange(1, n) * domain.L / domain.stride / n
    k = np.arange(1, domain.N + 1)
    e = math.sqrt(2 / domain.L) * np.sin(np.outer(x, k) * math.pi * domain.stride / domain.L)
    return float(np.sqrt(np.max(e**2 @ (1 / domain.eigenvalues()))))


def multiplier_v_norm(states: np.ndarray, domain: DomainSpec) -> np.ndarray:
    """||3 u^2||_V = 3 ||(u^2)'||_{L^2}, computed without truncating u^2."""
    return 3.0 * basis_for(domain).square_v_norm(states)


def event_level_for(k: int, alpha: float, domain: DomainSpec, safety: float = 0.98) -> dict:
    """Smallness levels that make the cone lemma applicable at grade k.

    Returns the operator-norm level ``eps_h`` (a fraction ``safety`` of the
    largest value for which :func:`admissible_delta` is feasible), the
    corresponding V-level of the multiplier ``eps_b = eps_h / C_sob`` and the
    V-level of the attractor ``eps_a`` with 6 C_span eps_a^2 = eps_b, which
    guarantees ||3 a^2||_V <= eps_b.
    """
    lam = domain.eigenvalues()
    gap = lam[k] - lam[k - 1]
    # (1 + delta)(1 + 1/delta) is minimal (= 4) at delta = 1
    eps_h = safety * gap / (4 * k)
    delta = admissible_delta(alpha, k, eps_h, domain)
    c_sob = sobolev_constant(domain)
    c_span = span_sobolev_constant(domain)
    eps_b = eps_h / c_sob
    eps_a = math.sqrt(eps_b / (6 * c_span))
    return {"eps_h": eps_h, "eps_b": eps_b, "eps_a": eps_a, "delta": delta,
            "sobolev_constant": c_sob, "span_sobolev_constant": c_span}


@dataclass(frozen=True, eq=False)
class ConeCertificate:
    """Q-series, differential-inequality residuals and norm lower-bound ratios."""

    times: np.ndarray
    q_values: np.ndarray
    residuals: np.ndarray
    min_residual: float
    norm_bound_ratio: np.ndarray
    rate: float
    params: ConeParams
    sup_multiplier: float
    precondition_ok: bool = True
    tol_cert: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def valid(self) -> bool:
        return (self.precondition_ok and self.min_residual >= -self.tol_cert
                and bool(np.all(self.q_values > 0)))

    @property
    def min_norm_ratio(self) -> float:
        return float(np.min(self.norm_bound_ratio)) if self.norm_bound_ratio.size else math.nan

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "Q", "residual", "norm_ratio"])
            for row in zip(self.times, self.q_values, self.residuals, self.norm_bound_ratio):
                w.writerow([repr(float(x)) for x in row])

    def summary(self) -> dict:
        return {"min_residual": self.min_residual, "valid": self.valid, "rate": self.rate,
                "precondition_ok": self.precondition_ok, "sup_multiplier": self.sup_multiplier,
                "min_norm_ratio": self.min_norm_ratio, "params": asdict(self.params), **self.meta}

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def _rate(params: ConeParams, alpha: float, lam: np.ndarray, eps_h: float) -> float:
    k, delta = params.k, params.delta
    lead = float(np.sum(alpha - lam[:k]))
    if params.coupled:
        return lead - 2 * delta
    return lead - (1 + delta) * k * eps_h / delta


def certify_cone_growth(base: TrajectoryRecord, v0, params: ConeParams, cfg: SolverConfig,
                        operator_epsilon: float | None = None) -> ConeCertificate:
    """Propagate a tangent vector (k = 1) or k-frame and check cone growth.

    Parameters
    ----------
    base : TrajectoryRecord
        Base trajectory; its first state is the linearization point at t = 0.
    v0 : SpectralField, sequence of SpectralField, or array (k, N)
        Initial vector or frame; must lie strictly inside the cone.
    operator_epsilon : float, optional
        Bound on the H operator norm of the multiplier used in the certified
        rate.  Defaults to ``sobolev_constant * params.epsilon``.

    Notes
    -----
    The residual at interior record times is (1/2) dQ/dt - rate Q with a
    centered difference; ``tol_cert`` is 1e-6 Q(v_0) + Q(v_0) dt^2.  The
    norm ratio compares ||v_t||^2 (or the squared k-volume) with
    ((M - 1)/(M + delta)) exp(2 t rate) ||v_0||^2.  If the multiplier is too
    large the certificate is returned with ``precondition_ok = False``.

    Raises
    ------
    InitialConeViolation
        If Q(v_0) <= 0.
    """
    domain = base.domain
    k = params.k
    if isinstance(v0, SpectralField):
        V0 = v0.coeffs[None, :]
    elif isinstance(v0, (list, tuple)) and v0 and isinstance(v0[0], SpectralField):
        V0 = np.vstack([f.coeffs for f in v0])
    else:
        V0 = np.atleast_2d(np.asarray(v0, dtype=float))
    if V0.shape != (k, domain.N):
        raise ValueError(f"initial frame must have shape ({k}, {domain.N})")

    # blade coordinates of the frame: leading minor and Gram determinant
    gram0 = float(np.linalg.det(V0 @ V0.T))
    lead0 = float(np.linalg.det(V0[:, :k]))
    q0 = params.delta * lead0**2 - (gram0 - lead0**2)
    if not q0 > 0:
        raise InitialConeViolation(f"initial Q = {q0:.3g} is not positive")

    sup_b = float(np.max(multiplier_v_norm(base.states, domain)))
    eps_h = sobolev_constant(domain) * params.epsilon if operator_epsilon is None else operator_epsilon
    lam = domain.eigenvalues()
    rate = _rate(params, cfg.alpha, lam, eps_h)
    dt = cfg.dt
    tol = 1e-6 * q0 + q0 * dt * dt
    meta = {"operator_epsilon": eps_h, "sobolev_constant": sobolev_constant(domain)}
    if sup_b > params.epsilon * (1 + 1e-12):
        empty = np.array([])
        return ConeCertificate(empty, empty, empty, -math.inf, empty, rate, params, sup_b,
                               False, tol, meta)

    # orthonormalize, remembering the initial triangular factor
    Qt, R0 = np.linalg.qr(V0.T)
    s = np.sign(np.diag(R0))
    s[s == 0] = 1
    F0 = (Qt * s).T
    R0 = R0 * s[:, None]
    st = stepper_for(domain, cfg)
    h = propagate_frames(st, base.states, F0, float(base.times[0]), 1,
                         np.log(np.diag(R0)), R0 / np.diag(R0)[:, None],
                         observe=lambda V: np.linalg.det(V[:, :k]))
    # recover blade coordinates from the orthonormal frames: the blade of the
    # propagated vectors is exp(sum log_r) * det(orientation) * blade(frame)
    vol2 = np.exp(2 * np.sum(h.log_r, axis=-1))
    lead2 = vol2 * h.observed**2
    qv = params.delta * lead2 - (vol2 - lead2)
    times = h.times - h.times[0]
    resid = np.full(qv.shape, np.nan)
    resid[1:-1] = 0.25 * (qv[2:] - qv[:-2]) / dt - rate * qv[1:-1]
    min_res = float(np.nanmin(resid)) if qv.size > 2 else 0.0
    pref = (params.M - 1) / (params.M + params.delta)
    ratio = vol2 / (pref * np.exp(2 * times * rate) * gram0)
    return ConeCertificate(times, qv, resid, min_res, ratio, rate, params, sup_b, True, tol, meta)

