"""Singleton pullback attractor, smallness events and the envelope check.

The attractor a(omega) is located by integrating a spread ensemble from time
-S to 0 with a common noise path, doubling S until the ensemble has
collapsed.  Smallness events {||a(theta^s omega)||_V in (0, eps) for s in
[0, T]} are found by rejection sampling.  Two sampling strategies exist:

``independent``
    every trial draws a fresh path and runs its own pullback;
``chained``
    each chain synchronizes once and is then followed forward; its
    consecutive windows [jT, (j+1)T] are the trials.  A window of a
    synchronized chain is exactly a(theta^s omega') for the shifted path
    omega' = theta^{jT} omega, so each window is a legitimate trial, at the
    cost of correlation between neighbouring windows of one chain.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .dynamics import SolverConfig, Stepper, TrajectoryRecord, stepper_for
from .noise import CovarianceSpec, NoisePath, PathSource, derive_seed
from .spectral import DomainSpec, SpectralField, basis_for
from .special import NotApplicableError, h1_envelope

__all__ = [
    "AttractorEstimate",
    "NoSynchronizationError",
    "RejectionExhaustedError",
    "EventSample",
    "EventSearch",
    "EnvelopeReport",
    "initial_ensemble",
    "pullback_attractor",
    "pullback_attractors",
    "sample_smallness_event",
    "search_smallness_events",
    "replay_event",
    "gronwall_envelope_check",
    "estimate_lipschitz",
    "semigroup_constant",
]


class NoSynchronizationError(RuntimeError):
    """Pullback ensemble did not collapse below tol by depth S_max."""

    def __init__(self, message: str, gap: float = math.nan, depth: float = math.nan,
                 estimate: np.ndarray | None = None):
        super().__init__(message)
        self.gap = gap
        self.depth = depth
        self.estimate = estimate


class RejectionExhaustedError(RuntimeError):
    """No accepted smallness event within max_trials."""

    def __init__(self, message: str, trials: int, min_sup: float):
        super().__init__(message)
        self.trials = trials
        self.min_sup = min_sup


@dataclass(frozen=True, eq=False)
class AttractorEstimate:
    """Ensemble mean at time 0 and the forward orbit ||a(theta^s omega)||_V."""

    a: SpectralField
    depth: float
    gap: float
    v_gap: float
    times: np.ndarray
    v_norm_series: np.ndarray
    record: TrajectoryRecord | None = None


def initial_ensemble(domain: DomainSpec, spread: float = 5.0) -> np.ndarray:
    """0 and the four corners +-c e_1 +- c e_2, shape (5, N)."""
    out = np.zeros((5, domain.N))
    signs = [(1, 1), (1, -1), (-1, 1), (-1, -1)]
    for j, (s1, s2) in enumerate(signs, start=1):
        out[j, 0] = s1 * spread
        if domain.N > 1:
            out[j, 1] = s2 * spread
    return out


def _diameters(X: np.ndarray, basis) -> tuple[np.ndarray, np.ndarray]:
    """Max pairwise H and V distances within each ensemble X (..., m, N)."""
    D = X[..., :, None, :] - X[..., None, :, :]
    h = np.sqrt(np.sum(D * D, axis=-1))
    v = np.sqrt(np.sum(basis.lam * D * D, axis=-1))
    return h.max(axis=(-1, -2)), v.max(axis=(-1, -2))


def _stack(sources, t0: float, t1: float) -> np.ndarray:
    return np.stack([s.window(t0, t1) for s in sources], axis=1)


def _integrate(st: Stepper, X: np.ndarray, sources, t0: float, t1: float,
               chunk: float = 1.0) -> np.ndarray:
    """Advance ensembles X (P, m, N) from t0 to t1 with the sources' noise."""
    t = t0
    while t < t1 - 1e-12:
        te = min(t + chunk, t1)
        dW = _stack(sources, t, te)[:, :, None, :]
        X = st.evolve(X, dW, t, record=False, check_every=100)
        t = te
    return X


def _depth_schedule(S0: float, S_max: float) -> list[float]:
    if not 0 < S0 <= S_max:
        raise ValueError("need 0 < S0 <= S_max")
    out = []
    S = S0
    while S <= S_max * (1 + 1e-12):
        out.append(S)
        S *= 2
    if out[-1] < S_max:
        out.append(S_max)
    return out


def _pullback_core(st: Stepper, sources, tol: float, S0: float, S_max: float,
                   spread: float):
    """Batched pullback; returns means (P, N), depths, H gaps and V gaps.

    Depth is NaN for paths that did not synchronize; their gap is the one
    reached at S_max.
    """
    P = len(sources)
    domain = st.domain
    X0 = initial_ensemble(domain, spread)
    means = np.zeros((P, domain.N))
    depths = np.full(P, np.nan)
    gaps = np.full(P, np.inf)
    vgaps = np.full(P, np.inf)
    todo = np.arange(P)
    for S in _depth_schedule(S0, S_max):
        if todo.size == 0:
            break
        srcs = [sources[i] for i in todo]
        X = np.broadcast_to(X0, (todo.size,) + X0.shape).copy()
        X = _integrate(st, X, srcs, -S, 0.0)
        h, v = _diameters(X, st.basis)
        means[todo] = X.mean(axis=1)
        gaps[todo] = h
        vgaps[todo] = v
        done = h < tol
        depths[todo[done]] = S
        todo = todo[~done]
    return means, depths, gaps, vgaps


def _forward(st: Stepper, a: np.ndarray, source, T: float) -> TrajectoryRecord:
    dt = st.cfg.dt
    if T <= 0:
        states = a[None, :]
    else:
        states = st.evolve(a, source.window(0.0, T), 0.0)
    return TrajectoryRecord(dt * np.arange(states.shape[0]), states, st.domain)


def _estimate(st, mean, depth, gap, vgap, source, T) -> AttractorEstimate:
    rec = _forward(st, mean, source, T)
    return AttractorEstimate(SpectralField(mean, st.domain), float(depth), float(gap),
                             float(vgap), rec.times, rec.v_norms, rec)


def pullback_attractor(path: NoisePath | PathSource, cfg: SolverConfig, tol: float = 1e-9,
                       S_max: float = 40.0, domain: DomainSpec | None = None,
                       S0: float = 5.0, spread: float = 5.0, T: float = 0.0) -> AttractorEstimate:
    """Locate a(omega) by pullback with depths S0, 2 S0, ... up to S_max.

    Raises
    ------
    NoSynchronizationError
        If the time-0 ensemble diameter is still >= tol at depth S_max.  The
        error carries the last gap and ensemble mean for diagnostics.
    """
    domain = domain or _domain_for(path)
    st = stepper_for(domain, cfg)
    means, depths, gaps, vgaps = _pullback_core(st, [path], tol, S0, S_max, spread)
    if np.isnan(depths[0]):
        raise NoSynchronizationError(
            f"ensemble diameter {gaps[0]:.3g} >= {tol:g} at depth {S_max}",
            float(gaps[0]), S_max, means[0])
    return _estimate(st, means[0], depths[0], gaps[0], vgaps[0], path, T)


def pullback_attractors(sources, cfg: SolverConfig, domain: DomainSpec, tol: float = 1e-9,
                        S_max: float = 40.0, S0: float = 5.0, spread: float = 5.0,
                        T: float = 0.0) -> list[AttractorEstimate | NoSynchronizationError]:
    """Batched :func:`pullback_attractor`; failures are returned, not raised."""
    st = stepper_for(domain, cfg)
    means, depths, gaps, vgaps = _pullback_core(st, list(sources), tol, S0, S_max, spread)
    out = []
    for i, src in enumerate(sources):
        if np.isnan(depths[i]):
            out.append(NoSynchronizationError(
                f"ensemble diameter {gaps[i]:.3g} >= {tol:g} at depth {S_max}",
                float(gaps[i]), S_max, means[i]))
        else:
            out.append(_estimate(st, means[i], depths[i], gaps[i], vgaps[i], src, T))
    return out


def _domain_for(path) -> DomainSpec:
    n = path.n_modes if isinstance(path, NoisePath) else path.cov.q.size
    return DomainSpec(N=n)


# -- smallness events -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EventSample:
    """One trial of the smallness-event search.

    For the chained strategy ``path`` holds the window's increments with the
    window start as time origin, and ``offset`` is the window start in the
    chain's own time.  ``record`` is a(theta^s omega) for s in [0, T].
    """

    path: NoisePath
    epsilon: float
    T: float
    accepted: bool
    trials_used: int
    sup_v: float
    min_v: float
    trial_index: int
    seed: int
    offset: float = 0.0
    strategy: str = "chained"
    record: TrajectoryRecord | None = None
    degenerate_zero: bool = False

    @property
    def attractor0(self) -> SpectralField | None:
        return None if self.record is None else self.record.state(0)

    def manifest_entry(self, config_hash: str = "") -> dict:
        return {"seed": self.seed, "trial_index": self.trial_index, "offset": self.offset,
                "strategy": self.strategy, "config_hash": config_hash,
                "sup_v": self.sup_v, "min_v": self.min_v}


@dataclass(eq=False)
class EventSearch:
    """All accepted events of a search plus trial accounting."""

    events: list[EventSample]
    trials: int
    min_sup: float
    epsilon: float
    T: float
    seed: int
    strategy: str
    n_chains: int
    skipped: int = 0
    degenerate_zero: bool = False
    sup_values: np.ndarray = field(default_factory=lambda: np.array([]))

    @property
    def first(self) -> EventSample | None:
        return self.events[0] if self.events else None

    @property
    def probability(self) -> float:
        return len(self.events) / self.trials if self.trials else math.nan

    def confidence_interval(self, level: float = 0.95) -> tuple[float, float]:
        if not self.trials:
            return (0.0, 1.0)
        ci = stats.binomtest(len(self.events), self.trials).proportion_ci(level, "wilson")
        return float(ci.low), float(ci.high)

    def acceptance_at(self, epsilon: float) -> float:
        """Fraction of evaluated trials whose sup-norm is below ``epsilon``."""
        if not self.sup_values.size:
            return math.nan
        return float(np.mean(self.sup_values < epsilon))

    def write_manifest(self, path, config_hash: str = "") -> None:
        data = {"epsilon": self.epsilon, "T": self.T, "seed": self.seed,
                "strategy": self.strategy, "n_chains": self.n_chains, "trials": self.trials,
                "config_hash": config_hash,
                "events": [e.manifest_entry(config_hash) for e in self.events]}
        with open(path, "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)


class _ChainRunner:
    """Synchronize a batch of chains and walk them forward window by window.

    The arithmetic for one chain does not depend on which other chains share
    the batch, so any chain can be replayed on its own bit for bit.
    """

    def __init__(self, st: Stepper, sources, burn_in: float, tol: float, spread: float):
        self.st = st
        self.sources = list(sources)
        self.tol = tol
        C = len(self.sources)
        X0 = initial_ensemble(st.domain, spread)
        X = np.broadcast_to(X0, (C,) + X0.shape).copy()
        self.X = _integrate(st, X, self.sources, -burn_in, 0.0)
        self.synced = np.zeros(C, dtype=bool)
        self._update_sync()

    def _update_sync(self) -> None:
        idx = np.flatnonzero(~self.synced)
        if idx.size == 0:
            return
        h, _ = _diameters(self.X[idx], self.st.basis)
        now = idx[h < self.tol]
        if now.size:
            self.X[now] = self.X[now].mean(axis=1, keepdims=True)
            self.synced[now] = True

    def advance(self, t0: float, t1: float):
        """Step all chains over [t0, t1]; return (valid mask, states of synced chains).

        states has shape (steps + 1, C, N) with NaN rows for chains that were
        not synchronized at t0.
        """
        st = self.st
        C = len(self.sources)
        valid = self.synced.copy()
        dW = _stack(self.sources, t0, t1)
        states = np.full((dW.shape[0] + 1, C, st.domain.N), np.nan)
        s_idx = np.flatnonzero(valid)
        u_idx = np.flatnonzero(~valid)
        if s_idx.size:
            traj = st.evolve(self.X[s_idx, 0], dW[:, s_idx], t0, check_every=100)
            states[:, s_idx] = traj
            self.X[s_idx] = traj[-1][:, None, :]
        if u_idx.size:
            self.X[u_idx] = st.evolve(self.X[u_idx], dW[:, u_idx, None, :], t0,
                                      record=False, check_every=100)
        self._update_sync()
        return valid, states


def _window_stats(st: Stepper, states: np.ndarray):
    v = st.basis.v_norm(states)
    return v.max(axis=0), v.min(axis=0)


def search_smallness_events(cov: CovarianceSpec, cfg: SolverConfig, epsilon: float, T: float,
                            max_trials: int, seed: int, domain: DomainSpec | None = None,
                            strategy: str = "chained", n_chains: int = 100,
                            burn_in: float = 40.0, tol: float = 1e-9, S0: float = 5.0,
                            S_max: float = 40.0, spread: float = 5.0,
                            stop_at_first: bool = False) -> EventSearch:
    """Rejection-sample windows with sup_s ||a(theta^s omega)||_V < epsilon.

    Trial ``i`` is deterministic given ``seed``: for the chained strategy it
    is window ``i // n_chains`` of chain ``i % n_chains`` (chain seeds come
    from ``derive_seed(seed, chain)``); for the independent strategy it uses
    the path with seed ``derive_seed(seed, i)``.  Windows of chains that
    have not synchronized yet are skipped: they are not counted as trials
    but their indices are used up, so at most ``max_trials`` indices are spent.
    """
    if not epsilon > 0 or not T > 0:
        raise ValueError("epsilon and T must be positive")
    if max_trials < 1:
        raise ValueError("max_trials must be >= 1")
    domain = domain or DomainSpec(N=cov.q.size)
    cov.validate(domain)
    st = stepper_for(domain, cfg)
    dt = cfg.dt
    events: list[EventSample] = []
    sups: list[float] = []
    trials = skipped = 0
    degenerate = not np.any(cov.q > 0)

    def consider(i, sup_v, min_v, seed_i, offset, src, states, strat):
        nonlocal trials
        trials += 1
        sups.append(sup_v)
        if sup_v < epsilon and min_v > 0:
            inc = src.window(offset, offset + T)
            path = NoisePath(dt, 0, inc, seed_i, cov)
            rec = TrajectoryRecord(dt * np.arange(states.shape[0]), states, domain)
            events.append(EventSample(path, epsilon, T, True, trials, sup_v, min_v, i,
                                      seed_i, offset, strat, rec))

    if strategy == "chained":
        C = min(n_chains, max_trials)
        seeds = [derive_seed(seed, c) for c in range(C)]
        sources = [PathSource(cov, dt, s) for s in seeds]
        runner = _ChainRunner(st, sources, burn_in, tol, spread)
        W = math.ceil(max_trials / C)
        for j in range(W):
            t0 = j * T
            valid, states = runner.advance(t0, t0 + T)
            sup_v, min_v = _window_stats(st, states)
            for c in range(C):
                i = j * C + c
                if i >= max_trials:
                    break
                if not valid[c]:
                    skipped += 1
                    continue
                consider(i, float(sup_v[c]), float(min_v[c]), seeds[c], t0, sources[c],
                         states[:, c], "chained")
            if stop_at_first and events:
                break
    elif strategy == "independent":
        C = min(n_chains, max_trials)
        for start in range(0, max_trials, C):
            idx = list(range(start, min(start + C, max_trials)))
            seeds = [derive_seed(seed, i) for i in idx]
            sources = [PathSource(cov, dt, s) for s in seeds]
            means, depths, _, _ = _pullback_core(st, sources, tol, S0, S_max, spread)
            for m, i in enumerate(idx):
                if np.isnan(depths[m]):
                    skipped += 1
                    continue
                states = st.evolve(means[m], sources[m].window(0.0, T), 0.0)
                v = st.basis.v_norm(states)
                consider(i, float(v.max()), float(v.min()), seeds[m], 0.0, sources[m],
                         states, "independent")
            if stop_at_first and events:
                break
    else:
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    sups_arr = np.array(sups)
    min_sup = float(sups_arr.min()) if sups_arr.size else math.inf
    return EventSearch(events, trials, min_sup, epsilon, T, seed, strategy,
                       min(n_chains, max_trials), skipped, degenerate, sups_arr)


def sample_smallness_event(cov: CovarianceSpec, cfg: SolverConfig, epsilon: float, T: float,
                           max_trials: int, seed: int, domain: DomainSpec | None = None,
                           **kwargs) -> EventSample:
    """First accepted smallness event.

    With q = 0 the attractor is identically zero, the positivity requirement
    fails, and a rejected sample flagged ``degenerate_zero`` is returned after
    one trial.

    Raises
    ------
    RejectionExhaustedError
        If no trial is accepted; carries the smallest observed sup-norm.
    """
    domain = domain or DomainSpec(N=cov.q.size)
    if not np.any(cov.q > 0):
        # the attractor is the origin: the first trial fails positivity
        src = PathSource(cov, cfg.dt, derive_seed(seed, 0))
        path = NoisePath(cfg.dt, 0, src.window(0.0, T), src.seed, cov)
        return EventSample(path, epsilon, T, False, 1, 0.0, 0.0, 0,
                           src.seed, 0.0, "independent", None, degenerate_zero=True)
    res = search_smallness_events(cov, cfg, epsilon, T, max_trials, seed, domain,
                                  stop_at_first=True, **kwargs)
    if not res.events:
        raise RejectionExhaustedError(
            f"no event with sup ||a||_V < {epsilon:g} in {res.trials} trials; "
            f"smallest observed sup-norm {res.min_sup:.4g}", res.trials, res.min_sup)
    return res.first


def replay_event(event: EventSample, cov: CovarianceSpec, cfg: SolverConfig,
                 domain: DomainSpec | None = None, burn_in: float = 40.0, tol: float = 1e-9,
                 S0: float = 5.0, S_max: float = 40.0, spread: float = 5.0) -> TrajectoryRecord:
    """Recompute a(theta^s omega) on the event window from its seed alone."""
    domain = domain or DomainSpec(N=cov.q.size)
    st = stepper_for(domain, cfg)
    src = PathSource(cov, cfg.dt, event.seed)
    if event.strategy == "chained":
        runner = _ChainRunner(st, [src], burn_in, tol, spread)
        j_end = round(event.offset / event.T)
        for j in range(j_end + 1):
            valid, states = runner.advance(j * event.T, (j + 1) * event.T)
        if not valid[0]:
            raise NoSynchronizationError("chain was not synchronized at the event window")
        states = states[:, 0]
    else:
        means, depths, gaps, _ = _pullback_core(st, [src], tol, S0, S_max, spread)
        if np.isnan(depths[0]):
            raise NoSynchronizationError("replay did not synchronize", float(gaps[0]))
        states = st.evolve(means[0], src.window(0.0, event.T), 0.0)
    return TrajectoryRecord(cfg.dt * np.arange(states.shape[0]), states, domain)


# -- envelope check ---------------------------------------------------------------


def semigroup_constant(domain: DomainSpec, T: float, n_grid: int = 2000) -> float:
    """C_T with ||S(t) f||_V <= C_T t^(-1/2) e^(-mu t) ||f||_H on (0, T].

    The heat semigroup shifted by alpha gives C_T^2 =
    sup_{t <= T, k} t lambda_k exp(-2 (lambda_k - lambda_1) t).
    """
    lam = domain.eigenvalues()
    t = np.linspace(T / n_grid, T, n_grid)[:, None]
    return float(np.sqrt(np.max(t * lam * np.exp(-2 * (lam - lam[0]) * t))))


def estimate_lipschitz(domain: DomainSpec, R: float, n_pairs: int = 2000, seed: int = 0) -> float:
    """Sampled sup of ||F(u) - F(v)||_H / ||u - v||_V over the V-ball of radius 2R.

    F is the cut-off cubic with radius R.  Half of the pairs are nearby
    (difference 1e-4 of the radius), which probes the derivative; the other
    half are independent.  Directions mix smooth and rough spectra.
    """
    if not R > 0:
        return 0.0
    st = Stepper(domain, SolverConfig(cutoff_radius=R))
    lam = domain.eigenvalues()
    rng = np.random.default_rng(seed)

    def draw(n):
        p = rng.choice([0.5, 1.0, 1.5, 2.0], size=(n, 1))
        c = rng.standard_normal((n, domain.N)) * lam ** (-p)
        c /= st.basis.v_norm(c)[:, None]
        r = 2 * R * rng.uniform(0, 1, (n, 1)) ** (1 / 3)
        return c * r

    n_near = n_pairs // 2
    u = draw(n_pairs)
    h = draw(n_pairs)
    h[:n_near] *= 1e-4
    v = u + h
    v[n_near:] = draw(n_pairs - n_near)
    # keep v inside the ball
    vn = st.basis.v_norm(v)
    v = np.where((vn > 2 * R)[:, None], v * (2 * R / np.maximum(vn, 1e-300))[:, None], v)
    num = st.basis.h_norm(st.nonlinearity(u) - st.nonlinearity(v))
    den = st.basis.v_norm(u - v)
    ok = den > 0
    return float(np.max(num[ok] / den[ok]))


@dataclass(frozen=True, eq=False)
class EnvelopeReport:
    """Simulated ||u~(t)||_V against the analytic envelope."""

    applicable: bool
    times: np.ndarray = field(default_factory=lambda: np.array([]))
    u_tilde_v: np.ndarray = field(default_factory=lambda: np.array([]))
    envelope: np.ndarray = field(default_factory=lambda: np.array([]))
    max_residual: float = math.nan
    lipschitz_raw: float = math.nan
    semigroup_constant: float = math.nan
    eta: float = math.nan
    eta_observed: float = math.nan
    mu: float = math.nan
    reason: str = ""

    @property
    def holds(self) -> bool:
        """Nonpositive residual, allowing roundoff relative to the envelope scale."""
        if not self.applicable:
            return False
        scale = max(1.0, float(np.max(self.envelope))) if self.envelope.size else 1.0
        return self.max_residual <= 1e-12 * scale


def gronwall_envelope_check(record: TrajectoryRecord, z_series: np.ndarray, eta: float,
                            cfg: SolverConfig, lipschitz_l: float | None = None,
                            n_pairs: int = 2000, seed: int = 0) -> EnvelopeReport:
    """Compare u~ = u - z along ``record`` with :func:`special.h1_envelope`.

    The Lipschitz constant of the cut-off cubic (radius R = max ||u||_V on
    the run) is estimated by sampling unless given, and is multiplied by the
    semigroup smoothing constant before entering the envelope.  Returns a
    not-applicable report when mu = lambda_1 - alpha <= 0.
    """
    domain = record.domain
    lam1 = float(domain.eigenvalues()[0])
    mu = lam1 - cfg.alpha
    if mu <= 0:
        return EnvelopeReport(False, mu=mu, reason="mu = lambda_1 - alpha <= 0")
    z = np.asarray(z_series, dtype=float)
    if z.shape != record.states.shape:
        raise ValueError("OU series must match the trajectory shape")
    b = basis_for(domain)
    ut = record.states - z
    ut_v = b.v_norm(ut)
    eta_obs = float(np.max(b.v_norm(z)))
    times = record.times - record.times[0]
    R = float(np.max(record.v_norms))
    if lipschitz_l is None:
        lipschitz_l = estimate_lipschitz(domain, R, n_pairs, seed) if R > 0 else 0.0
    c_t = semigroup_constant(domain, float(times[-1])) if times[-1] > 0 else 1.0
    try:
        env = h1_envelope(float(ut_v[0]), eta, c_t * lipschitz_l, mu, times)
    except NotApplicableError as exc:
        return EnvelopeReport(False, mu=mu, reason=str(exc))
    resid = ut_v - env.total
    return EnvelopeReport(True, times, ut_v, env.total, float(np.max(resid)), lipschitz_l,
                          c_t, eta, eta_obs, mu)
