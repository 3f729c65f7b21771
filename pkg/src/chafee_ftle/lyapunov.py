"""Finite-time Lyapunov exponents and volume growth rates.

A frame of k tangent vectors is stepped with the exact derivative of the
discrete SPDE map and re-orthonormalized by QR (Benettin's method).  Besides
the per-direction logs of the stretching factors the engine keeps the
accumulated triangular factor in graded form, R = diag(exp(log_r)) U, so that
the largest singular value of the propagated frame (the operator norm of the
linearization restricted to the initial span) is available at every record
time without overflow.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import SolverConfig, Stepper, TrajectoryRecord, stepper_for
from .noise import NoisePath
from .spectral import DomainSpec, SpectralField

__all__ = [
    "DegenerateFrameError",
    "TangentFrame",
    "FtleReport",
    "FrameHistory",
    "propagate_frame",
    "propagate_frames",
    "ftle_top",
    "volume_growth",
    "upper_bound_lines",
    "STRETCH_FLOOR",
]

STRETCH_FLOOR = 1e-300


class DegenerateFrameError(ArithmeticError):
    """A stretching factor fell below the floor (rank collapse)."""


@dataclass(frozen=True, eq=False)
class TangentFrame:
    """k orthonormal tangent vectors with accumulated log stretching factors.

    ``U`` is the unit-diagonal triangular part of the accumulated QR factor;
    together with ``log_r`` it represents the propagated initial frame.
    """

    vectors: np.ndarray
    domain: DomainSpec
    log_r: np.ndarray = None
    t_elapsed: float = 0.0
    U: np.ndarray = None

    def __post_init__(self):
        v = np.array(self.vectors, dtype=float)
        if v.ndim != 2 or v.shape[1] != self.domain.N:
            raise ValueError(f"frame must have shape (k, {self.domain.N})")
        k = v.shape[0]
        log_r = np.zeros(k) if self.log_r is None else np.array(self.log_r, dtype=float)
        U = np.eye(k) if self.U is None else np.array(self.U, dtype=float)
        for a in (v, log_r, U):
            a.setflags(write=False)
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "log_r", log_r)
        object.__setattr__(self, "U", U)

    @classmethod
    def leading(cls, k: int, domain: DomainSpec) -> TangentFrame:
        """Frame (e_1, ..., e_k)."""
        return cls(np.eye(k, domain.N), domain)

    @classmethod
    def from_fields(cls, fields: list[SpectralField]) -> TangentFrame:
        """Orthonormalize arbitrary fields; their initial stretching is recorded."""
        domain = fields[0].domain
        A = np.vstack([f.coeffs for f in fields])
        Q, R = _qr_positive(A[None])
        d = np.abs(np.diagonal(R[0]))
        if np.any(d < STRETCH_FLOOR):
            raise DegenerateFrameError("initial vectors are linearly dependent")
        return cls(Q[0], domain, np.log(d), 0.0, R[0] / d[:, None])

    @property
    def k(self) -> int:
        return self.vectors.shape[0]

    @property
    def log_volume(self) -> float:
        return float(np.sum(self.log_r))

    def orthonormality_error(self) -> float:
        G = self.vectors @ self.vectors.T
        return float(np.max(np.abs(G - np.eye(self.k))))

    def log_top_singular_value(self) -> float:
        return float(_log_sigma_max(self.log_r[None], self.U[None])[0])


def _qr_positive(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched QR of row frames A (..., k, N): A = R^T Q with positive diag(R).

    Returns Q with orthonormal rows and the upper triangular factor R such
    that the propagated vectors are expressed as A^T = Q^T R.
    """
    Qt, R = np.linalg.qr(np.swapaxes(A, -1, -2))
    s = np.sign(np.diagonal(R, axis1=-2, axis2=-1))
    s = np.where(s == 0, 1.0, s)
    Qt = Qt * s[..., None, :]
    R = R * s[..., :, None]
    return np.swapaxes(Qt, -1, -2), R


def _log_singular_values(log_r: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Descending logs of the singular values of diag(exp(log_r)) U, batched.

    Directions that underflow after grading get -inf; only the leading
    values are meaningful in that case.
    """
    top = np.max(log_r, axis=-1)
    M = np.exp(log_r - top[..., None])[..., :, None] * U
    s = np.linalg.svd(M, compute_uv=False)
    with np.errstate(divide="ignore"):
        return top[..., None] + np.log(s)


def _log_sigma_max(log_r: np.ndarray, U: np.ndarray) -> np.ndarray:
    return _log_singular_values(log_r, U)[..., 0]


@dataclass
class FrameHistory:
    """Array-level output of :func:`propagate_frames` (leading batch axes kept)."""

    times: np.ndarray
    log_r: np.ndarray  # (n_rec, ..., k)
    log_sv: np.ndarray  # (n_rec, ..., k), descending log singular values of the frame
    vectors: np.ndarray  # final frame (..., k, N)
    U: np.ndarray  # final graded triangular factor (..., k, k)
    observed: np.ndarray | None = None  # observe(frame) at each record time

    @property
    def log_sigma(self) -> np.ndarray:
        return self.log_sv[..., 0]


def propagate_frames(stepper: Stepper, base: np.ndarray, V0: np.ndarray, t0: float = 0.0,
                     reorth_every: int = 1, log_r0=None, U0=None,
                     observe=None) -> FrameHistory:
    """Step batched frames along batched base trajectories.

    Parameters
    ----------
    base : ndarray, shape (steps + 1, ..., N)
        Base states at every step; only the first ``steps`` drive the tangent map.
    V0 : ndarray, shape (..., k, N)
        Orthonormal initial frames.
    reorth_every : int
        Steps between orthonormalizations; stretching is recorded at those times
        and at the final step.
    observe : callable, optional
        Applied to the orthonormal frame at every record time; the results
        are stacked into ``FrameHistory.observed``.

    Raises
    ------
    DegenerateFrameError
        If any stretching factor drops below ``STRETCH_FLOOR``.
    """
    if reorth_every < 1:
        raise ValueError("reorth_every must be >= 1")
    n = base.shape[0] - 1
    V = np.array(V0, dtype=float)
    k = V.shape[-2]
    batch = V.shape[:-2]
    log_r = np.zeros(batch + (k,)) if log_r0 is None else np.array(log_r0, dtype=float)
    U = np.broadcast_to(np.eye(k), batch + (k, k)).copy() if U0 is None else np.array(U0)
    dt = stepper.cfg.dt
    rec_steps = list(range(0, n + 1, reorth_every))
    if rec_steps[-1] != n:
        rec_steps.append(n)
    n_rec = len(rec_steps)
    hist_r = np.empty((n_rec,) + batch + (k,))
    hist_s = np.empty((n_rec,) + batch + (k,))
    hist_r[0] = log_r
    hist_s[0] = _log_singular_values(log_r, U)
    obs = [observe(V)] if observe is not None else None
    j = 1
    with np.errstate(divide="ignore"):
        for i in range(n):
            V = stepper.variational(V, base[i])
            if i + 1 == rec_steps[j]:
                Q, R = _qr_positive(V)
                d = np.diagonal(R, axis1=-2, axis2=-1)
                if np.any(d < STRETCH_FLOOR) or not np.all(np.isfinite(d)):
                    raise DegenerateFrameError(
                        f"stretching factor below {STRETCH_FLOOR:g} at t={t0 + (i + 1) * dt:g}"
                    )
                log_d = np.log(d)
                new_log_r = log_r + log_d
                # graded update: U' = D'^-1 R D U with D = diag(exp(log_r))
                scale = np.exp(log_r[..., None, :] - new_log_r[..., :, None])
                U = np.triu((R * scale) @ U)
                log_r = new_log_r
                V = Q
                hist_r[j] = log_r
                hist_s[j] = _log_singular_values(log_r, U)
                if obs is not None:
                    obs.append(observe(V))
                j += 1
    times = t0 + dt * np.array(rec_steps, dtype=float)
    return FrameHistory(times, hist_r, hist_s, V, U, None if obs is None else np.array(obs))


def _base_slice(base: TrajectoryRecord, t0: float, t1: float) -> np.ndarray:
    dt = base.dt
    i0 = round((t0 - base.times[0]) / dt)
    i1 = round((t1 - base.times[0]) / dt)
    if i0 < 0 or i1 >= len(base.times) or i1 < i0:
        raise IndexError(f"base trajectory does not cover [{t0}, {t1}]")
    return base.states[i0 : i1 + 1]


def propagate_frame(frame: TangentFrame, base: TrajectoryRecord, t0: float, t1: float,
                    cfg: SolverConfig, reorth_every: int = 1) -> TangentFrame:
    """Advance a tangent frame along ``base`` from t0 to t1."""
    if base.dt and not math.isclose(base.dt, cfg.dt, rel_tol=1e-9):
        raise ValueError("base trajectory step differs from solver step")
    states = _base_slice(base, t0, t1)
    st = stepper_for(frame.domain, cfg)
    h = propagate_frames(st, states, frame.vectors, t0, reorth_every, frame.log_r, frame.U)
    return TangentFrame(h.vectors, frame.domain, h.log_r[-1], frame.t_elapsed + (t1 - t0), h.U)


def upper_bound_lines(alpha: float, domain: DomainSpec, k: int) -> tuple[np.ndarray, np.ndarray]:
    """alpha - lambda_i and the cumulative sums, i = 1..k."""
    lam = domain.eigenvalues()[:k]
    return alpha - lam, np.cumsum(alpha - lam)


@dataclass(frozen=True, eq=False)
class FtleReport:
    """FTLE and volume-growth series on a time grid.

    ``lam[:, i]`` is Lambda_{i+1}(t) and ``v[:, i]`` is V_{i+1}(t).  For
    :func:`ftle_top` the first column uses the largest singular value of the
    propagated probe frame.  Entries at t = 0 are NaN.
    """

    times: np.ndarray
    lam: np.ndarray
    v: np.ndarray
    lambda_bounds: np.ndarray
    volume_bounds: np.ndarray
    base_point: str = "user"
    probe_converged: bool | None = None
    meta: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.v.shape[1]

    def max_violation(self, t_min: float = 0.0) -> np.ndarray:
        """max_t (V_j(t) - bound_j) for j = 1..k over t > t_min."""
        m = self.times > t_min
        return np.max(self.v[m] - self.volume_bounds, axis=0)

    def max_lambda1_violation(self, t_min: float = 0.0) -> float:
        m = self.times > t_min
        return float(np.max(self.lam[m, 0] - self.lambda_bounds[0]))

    def to_csv(self, path, header: dict | None = None) -> None:
        with open(path, "w", newline="") as fh:
            for key, val in (header or {}).items():
                fh.write(f"# {key}: {val}\n")
            w = csv.writer(fh)
            w.writerow(["t", "k", "lambda_k", "v_k", "bound_k"])
            for i, t in enumerate(self.times):
                for j in range(self.k):
                    w.writerow([repr(float(t)), j + 1, repr(float(self.lam[i, j])),
                                repr(float(self.v[i, j])), repr(float(self.volume_bounds[j]))])


def _rates(times: np.ndarray, logs: np.ndarray) -> np.ndarray:
    out = np.full(logs.shape, np.nan)
    pos = times > 0
    out[pos] = logs[pos] / times[pos].reshape((-1,) + (1,) * (logs.ndim - 1))
    return out


def _base_states(path: NoisePath, u0: SpectralField, T: float, cfg: SolverConfig) -> np.ndarray:
    st = stepper_for(u0.domain, cfg)
    return st.evolve(u0.coeffs, path.window(0.0, T), 0.0)


def _on_grid(times: np.ndarray, t_grid) -> np.ndarray:
    if t_grid is None:
        return np.arange(times.size)
    idx = np.searchsorted(times, np.asarray(t_grid, dtype=float) - 1e-9)
    if np.any(idx >= times.size) or not np.allclose(times[idx], t_grid, atol=1e-9):
        raise ValueError("t_grid must be a subset of the recorded step times")
    return idx


def ftle_top(path: NoisePath, u0: SpectralField, t_grid, cfg: SolverConfig, k_probe: int = 4,
             check_probe: bool = True, base_point: str = "user", probe_tol: float = 1e-4) -> FtleReport:
    """Lambda_1(t) from the largest singular value of a propagated k_probe frame.

    The probe frame starts at (e_1, ..., e_k_probe).  With ``check_probe`` the
    computation is repeated with twice as many vectors and the report records
    whether both agree within ``probe_tol`` at every grid time.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    T = float(t_grid.max())
    base = _base_states(path, u0, T, cfg)
    st = stepper_for(u0.domain, cfg)
    h = propagate_frames(st, base, np.eye(k_probe, u0.domain.N))
    idx = _on_grid(h.times, t_grid)
    lam1 = _rates(h.times, h.log_sigma)[idx]
    converged = None
    if check_probe:
        h2 = propagate_frames(st, base, np.eye(2 * k_probe, u0.domain.N))
        lam2 = _rates(h2.times, h2.log_sigma)[idx]
        diff = np.abs(lam2 - lam1)
        converged = bool(np.all(diff[np.isfinite(diff)] <= probe_tol))
    lb, vb = upper_bound_lines(cfg.alpha, u0.domain, 1)
    return FtleReport(t_grid, lam1[:, None], lam1[:, None], lb, vb, base_point, converged,
                      {"k_probe": k_probe})


def volume_growth(path: NoisePath, u0: SpectralField, k: int, t_grid, cfg: SolverConfig,
                  reorth_every: int = 1, base_point: str = "user",
                  k_probe: int | None = None) -> FtleReport:
    """Volume growth rates V_j(t), j <= k.

    By default V_j = log_volume_j / t for the frame (e_1, ..., e_k) and the
    per-index exponents come from the ordered stretching factors.  With
    ``k_probe >= k`` a frame (e_1, ..., e_k_probe) is propagated instead and
    V_j is the log of the product of its j largest singular values, which is
    the volume growth maximized over j-planes inside the probe span.
    """
    if not 1 <= k <= u0.domain.N:
        raise ValueError(f"k must lie in 1..{u0.domain.N}")
    kf = k if k_probe is None else k_probe
    if kf < k:
        raise ValueError("k_probe must be at least k")
    t_grid = np.asarray(t_grid, dtype=float)
    base = _base_states(path, u0, float(t_grid.max()), cfg)
    st = stepper_for(u0.domain, cfg)
    h = propagate_frames(st, base, np.eye(kf, u0.domain.N), 0.0, reorth_every)
    idx = _on_grid(h.times, t_grid)
    logs = h.log_r if k_probe is None else h.log_sv
    lam = _rates(h.times, logs[..., :k])[idx]
    v = _rates(h.times, np.cumsum(logs[..., :k], axis=-1))[idx]
    lb, vb = upper_bound_lines(cfg.alpha, u0.domain, k)
    return FtleReport(t_grid, lam, v, lb, vb, base_point, None, {"k_probe": k_probe})
