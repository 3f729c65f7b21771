"""Ensemble experiments behind the command line interface.

Each ``run_*`` function returns a plain report (dicts and row lists) and,
when an output directory is given, writes CSV series and a JSON summary.
Ensemble members are processed in fixed-size chunks whose composition does
not depend on the worker count, and member ``i`` always uses the noise seed
``derive_seed(noise.seed, i)``, so outputs are identical for any number of
workers.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .attractor import _pullback_core, gronwall_envelope_check, search_smallness_events
from .config import ExperimentConfig
from .cones import ConeParams, certify_cone_growth, event_level_for
from .dynamics import BlowUpError, stepper_for
from .lyapunov import DegenerateFrameError, propagate_frames
from .noise import PathSource, derive_seed, ou_path

__all__ = [
    "RunReport",
    "run_attractor",
    "run_upper_bounds",
    "run_lower_bound_event",
    "run_bifurcation_sweep",
    "upper_bound_member_batch",
    "event_lower_bounds",
    "event_levels",
    "envelope_events",
]

log = logging.getLogger(__name__)


@dataclass
class RunReport:
    name: str
    config_hash: str
    summary: dict
    tables: dict[str, tuple[list[str], list[list]]] = field(default_factory=dict)
    failed: bool = False

    def write(self, directory, formats=("csv", "json")) -> list[str]:
        os.makedirs(directory, exist_ok=True)
        written = []
        header = {"config_hash": self.config_hash, "version": __version__}
        if "csv" in formats:
            for tname, (cols, rows) in self.tables.items():
                path = os.path.join(directory, f"{self.name}_{tname}.csv")
                with open(path, "w", newline="") as fh:
                    for k, v in header.items():
                        fh.write(f"# {k}: {v}\n")
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(cols)
                    for row in rows:
                        w.writerow([_cell(x) for x in row])
                written.append(path)
        if "json" in formats:
            path = os.path.join(directory, f"{self.name}_summary.json")
            with open(path, "w") as fh:
                json.dump({**header, "run_failed": self.failed, **self.summary}, fh, indent=2,
                          sort_keys=True, default=_json_default)
                fh.write("\n")
            written.append(path)
        return written


def _cell(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def _json_default(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not serializable: {type(x)}")


def _chunks(n: int, size: int) -> list[list[int]]:
    return [list(range(s, min(s + size, n))) for s in range(0, n, size)]


def _map_chunks(fn, cfg: ExperimentConfig, chunks, workers: int, *args):
    if workers <= 1 or len(chunks) <= 1:
        return [fn(cfg, c, *args) for c in chunks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, cfg, c, *args) for c in chunks]
        return [f.result() for f in futures]


def _sources(cfg: ExperimentConfig, idx: list[int]) -> list[PathSource]:
    cov = cfg.covariance()
    return [PathSource(cov, cfg.solver.dt, derive_seed(cfg.noise.seed, i)) for i in idx]


def _pullback(cfg: ExperimentConfig, sources, solver=None):
    a = cfg.analysis
    st = stepper_for(cfg.domain, solver or cfg.solver)
    return _pullback_core(st, sources, a.sync_tol, a.S0, a.S_max, a.spread)


# -- attractor --------------------------------------------------------------------


def _attractor_chunk(cfg: ExperimentConfig, idx: list[int]):
    srcs = _sources(cfg, idx)
    try:
        means, depths, gaps, vgaps = _pullback(cfg, srcs)
    except BlowUpError as exc:
        return [(i, None, math.nan, math.nan, math.nan, str(exc)) for i in idx]
    st = stepper_for(cfg.domain, cfg.solver)
    out = []
    T = cfg.analysis.T
    for m, i in enumerate(idx):
        if np.isnan(depths[m]):
            out.append((i, None, depths[m], gaps[m], vgaps[m], "no synchronization"))
            continue
        states = st.evolve(means[m], srcs[m].window(0.0, T), 0.0, check_every=100)
        out.append((i, st.basis.v_norm(states), depths[m], gaps[m], vgaps[m], ""))
    return out


def run_attractor(cfg: ExperimentConfig, workers: int = 1) -> RunReport:
    """Pullback attractor for every ensemble member and ||a(theta^s omega)||_V on [0, T]."""
    n = cfg.noise.ensemble_size
    res = [r for chunk in _map_chunks(_attractor_chunk, cfg, _chunks(n, cfg.analysis.chunk_size),
                                      workers) for r in chunk]
    stride = cfg.analysis.record_stride
    dt = cfg.solver.dt
    members, series = [], []
    for i, v, depth, gap, vgap, err in res:
        members.append([i, depth, gap, vgap, err == "", err])
        if v is not None:
            for j in range(0, v.size, stride):
                series.append([i, j * dt, v[j]])
    failed = sum(1 for m in members if not m[4])
    summary = {"ensemble_size": n, "succeeded": n - failed, "failed": failed,
               "depths": [m[1] for m in members]}
    rep = RunReport("attractor", cfg.config_hash, summary, {
        "members": (["member", "depth", "gap_h", "gap_v", "ok", "error"], members),
        "series": (["member", "s", "v_norm"], series)})
    rep.failed = n > 0 and failed >= cfg.analysis.failure_threshold * n
    return rep


# -- upper bounds -----------------------------------------------------------------


def upper_bound_member_batch(cfg: ExperimentConfig, idx: list[int], refine: bool = False):
    """Per-member FTLE/volume series at dt (and at dt/2 if ``refine``).

    Returns a list of dicts with keys ``member``, ``error`` and, on success,
    ``lam1`` (n_t,), ``v`` (n_t, k_max) and ``times`` for each resolution.
    The dt/2 run starts from the attractor found at dt and uses the same
    noise refined by Brownian bridges.
    """
    a = cfg.analysis
    srcs = _sources(cfg, idx)
    out = [{"member": i, "error": ""} for i in idx]
    try:
        means, depths, gaps, _ = _pullback(cfg, srcs)
    except BlowUpError as exc:
        for o in out:
            o["error"] = f"blow-up: {exc}"
        return out
    ok = [m for m in range(len(idx)) if not np.isnan(depths[m])]
    for m in range(len(idx)):
        if np.isnan(depths[m]):
            out[m]["error"] = f"no synchronization (gap {gaps[m]:.3g})"
    if not ok:
        return out
    runs = [("dt", cfg.solver, [srcs[m] for m in ok])]
    if refine:
        runs.append(("dt2", cfg.solver.with_dt(cfg.solver.dt / 2), [srcs[m].refined() for m in ok]))
    for tag, solver, s2 in runs:
        st = stepper_for(cfg.domain, solver)
        try:
            dW = np.stack([s.window(0.0, a.T) for s in s2], axis=1)
            base = st.evolve(means[ok], dW, 0.0, check_every=100)
            h = propagate_frames(st, base, np.broadcast_to(np.eye(a.k_probe, cfg.domain.N),
                                                             (len(ok), a.k_probe, cfg.domain.N)))
        except (BlowUpError, DegenerateFrameError) as exc:
            for m in ok:
                out[m]["error"] = f"{tag}: {exc}"
            continue
        t = h.times
        with np.errstate(invalid="ignore", divide="ignore"):
            rates = np.cumsum(h.log_sv[..., : a.k_max], axis=-1) / t[:, None, None]
        for j, m in enumerate(ok):
            out[m][tag] = {"times": t[1:], "v": rates[1:, j], "lam1": rates[1:, j, 0]}
    return out


def _margins(cfg: ExperimentConfig, v: np.ndarray) -> np.ndarray:
    lam = cfg.domain.eigenvalues()[: cfg.analysis.k_max]
    bound = np.cumsum(cfg.solver.alpha - lam)
    return np.max(v - bound, axis=0)


def run_upper_bounds(cfg: ExperimentConfig, workers: int = 1, dt_refine: bool = False) -> RunReport:
    """Worst-case margins of Lambda_1 <= alpha - lambda_1 and V_k <= sum(alpha - lambda_i).

    The margin of path p and grade k is max_t [V_k(t) - sum_{i<=k}(alpha - lambda_i)]
    over the recorded t in (0, T]; its positive part is the violation.
    """
    a = cfg.analysis
    n = cfg.noise.ensemble_size
    chunks = _chunks(n, a.chunk_size)
    res = [r for c in _map_chunks(upper_bound_member_batch, cfg, chunks, workers, dt_refine)
           for r in c]
    tags = ["dt", "dt2"] if dt_refine else ["dt"]
    rows, series = [], []
    margins = {t: [] for t in tags}
    failed = 0
    stride = a.record_stride
    for r in res:
        if r["error"] or any(t not in r for t in tags):
            failed += 1
            rows.append([r["member"], "", 0, math.nan, math.nan, r["error"] or "incomplete"])
            log.warning("member %d failed: %s", r["member"], r["error"])
            continue
        for tag in tags:
            mg = _margins(cfg, r[tag]["v"])
            margins[tag].append(mg)
            for k in range(a.k_max):
                rows.append([r["member"], tag, k + 1, mg[k], max(mg[k], 0.0), ""])
        d = r["dt"]
        for j in range(stride - 1, d["times"].size, stride):
            for k in range(a.k_max):
                series.append([r["member"], d["times"][j], k + 1, d["v"][j, k]])
    summary = {"ensemble_size": n, "succeeded": n - failed, "failed": failed,
               "alpha": cfg.solver.alpha, "k_max": a.k_max, "tol_disc": a.tol_disc}
    for tag in tags:
        if margins[tag]:
            M = np.array(margins[tag])
            worst = M.max(axis=0)
            summary[f"worst_margin_{tag}"] = worst.tolist()
            summary[f"worst_violation_{tag}"] = np.maximum(worst, 0.0).tolist()
    if dt_refine and margins["dt"]:
        v1 = np.maximum(np.array(summary["worst_violation_dt"]), 0.0)
        v2 = np.maximum(np.array(summary["worst_violation_dt2"]), 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(v2 > 0, v1 / v2, np.inf)
        summary["violation_shrink_ratio"] = [None if not math.isfinite(x) else x for x in ratio]
        summary["refinement_ok"] = bool(np.all((v1 == 0) & (v2 == 0) | (ratio >= 1.5)))
    rep = RunReport("upper_bounds", cfg.config_hash, summary, {
        "members": (["member", "resolution", "k", "margin", "violation", "error"], rows),
        "series": (["member", "t", "k", "v_k"], series)})
    rep.failed = n > 0 and failed >= a.failure_threshold * n
    return rep


# -- lower bound on smallness events ----------------------------------------------------


def event_levels(cfg: ExperimentConfig, k: int) -> dict:
    """Smallness level and cone parameters used by the lower-bound experiment."""
    alpha = cfg.solver.alpha
    lam = cfg.domain.eigenvalues()
    if alpha > lam[k - 1]:
        lv = event_level_for(k, alpha, cfg.domain)
    else:
        lv = {"eps_h": math.nan, "eps_b": math.nan, "eps_a": math.nan, "delta": None}
    if cfg.analysis.epsilon is not None:
        lv["eps_a"] = cfg.analysis.epsilon
    return lv


def event_lower_bounds(cfg: ExperimentConfig, events, k: int, levels: dict) -> list[dict]:
    """FTLE/volume lower-bound check and cone certificate on each event."""
    a = cfg.analysis
    alpha = cfg.solver.alpha
    lam = cfg.domain.eigenvalues()
    target = float(np.sum(alpha - lam[:k])) - a.delta
    st = stepper_for(cfg.domain, cfg.solver)
    out = []
    if not events:
        return out
    base = np.stack([e.record.states for e in events], axis=1)
    kp = max(a.k_probe, k)
    h = propagate_frames(st, base, np.broadcast_to(np.eye(kp, cfg.domain.N),
                                                     (len(events), kp, cfg.domain.N)))
    t = h.times
    with np.errstate(invalid="ignore", divide="ignore"):
        vk = np.sum(h.log_sv[..., :k], axis=-1) / t[:, None]
    floor = t >= a.t_floor - 1e-12
    pos = t > 0
    cone_delta = levels.get("delta")
    for j, e in enumerate(events):
        rec = {"trial_index": e.trial_index, "seed": e.seed, "offset": e.offset,
               "sup_v": e.sup_v, "min_rate_floored": float(np.min(vk[floor, j])),
               "min_rate_raw": float(np.min(vk[pos, j])), "target": target}
        rec["achieved"] = rec["min_rate_floored"] >= target
        rec["achieved_raw"] = rec["min_rate_raw"] >= target
        if cone_delta is not None:
            params = ConeParams(cone_delta, k, a.M, levels["eps_b"])
            cert = certify_cone_growth(e.record, np.eye(k, cfg.domain.N), params, cfg.solver,
                                       operator_epsilon=levels["eps_h"])
            rec.update(cone_min_residual=cert.min_residual, cone_valid=cert.valid,
                       cone_min_norm_ratio=cert.min_norm_ratio,
                       cone_precondition=cert.precondition_ok, cone_rate=cert.rate)
        out.append(rec)
    return out


def run_lower_bound_event(cfg: ExperimentConfig, workers: int = 1) -> RunReport:
    """Sample smallness events and check the lower bounds on them.

    The report is marked failed when no event is accepted (rejection
    exhausted); the summary then carries the smallest observed sup-norm.
    """
    a = cfg.analysis
    k = a.k
    lam = cfg.domain.eigenvalues()
    alpha = cfg.solver.alpha
    if not alpha > float(np.mean(lam[:k])):
        raise ValueError(f"alpha must exceed the mean of the first {k} eigenvalues")
    levels = event_levels(cfg, k)
    search = search_smallness_events(cfg.covariance(), cfg.solver, levels["eps_a"], a.T,
                                     a.max_trials, cfg.noise.seed, cfg.domain, "chained",
                                     a.n_chains, a.burn_in, a.sync_tol, a.S0, a.S_max, a.spread)
    lo, hi = search.confidence_interval()
    summary = {"k": k, "alpha": alpha, "epsilon": levels["eps_a"], "levels": levels,
               "trials": search.trials, "skipped_unsynchronized": search.skipped,
               "accepted": len(search.events), "probability": search.probability,
               "probability_ci95": [lo, hi], "min_sup": search.min_sup}
    if not search.events:
        summary["error"] = (f"rejection exhausted after {search.trials} trials; smallest sup "
                            f"||a||_V = {search.min_sup:.4g}; increase epsilon or max_trials")
        return RunReport("lower_bound_event", cfg.config_hash, summary, {}, failed=True)
    recs = event_lower_bounds(cfg, search.events, k, levels)
    frac = float(np.mean([r["achieved"] for r in recs]))
    frac_raw = float(np.mean([r["achieved_raw"] for r in recs]))
    summary.update(fraction_achieved=frac, fraction_achieved_raw=frac_raw,
                   t_floor=a.t_floor, delta=a.delta)
    if "cone_min_residual" in recs[0]:
        summary["cone_min_residual"] = min(r["cone_min_residual"] for r in recs)
        summary["cone_valid_fraction"] = float(np.mean([r["cone_valid"] for r in recs]))
    cols = list(recs[0].keys())
    rows = [[r[c] for c in cols] for r in recs]
    return RunReport("lower_bound_event", cfg.config_hash, summary, {"events": (cols, rows)})


# -- bifurcation sweep ---------------------------------------------------------------


def _quantiles(x) -> list[float]:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return [math.nan] * 3
    return np.quantile(x, [0.05, 0.5, 0.95]).tolist()


def run_bifurcation_sweep(cfg: ExperimentConfig, alpha_grid=None, workers: int = 1) -> RunReport:
    """Conditional (on smallness events) and unconditional Lambda_k(T) quantiles per alpha.

    Lambda_k(T) is log sigma_k / T of the propagated probe frame.  Per-alpha
    failures are logged and recorded in the summary.
    """
    a = cfg.analysis
    grid = list(a.alpha_grid if alpha_grid is None else alpha_grid)
    rows = []
    errors = {}
    for alpha in grid:
        c = cfg.with_overrides(solver={"alpha": float(alpha)})
        try:
            res = [r for ch in _map_chunks(upper_bound_member_batch, c,
                                           _chunks(c.noise.ensemble_size, a.chunk_size), workers)
                   for r in ch]
            good = [r for r in res if not r["error"] and "dt" in r]
            lam_k = np.array([np.diff(np.concatenate([[0.0], r["dt"]["v"][-1]])) for r in good])
            for k in range(a.k_max):
                vals = lam_k[:, k] if lam_k.size else []
                rows.append([alpha, k + 1, "unconditional", len(vals), *_quantiles(vals)])
            eps = a.epsilon if a.epsilon is not None else 0.4
            search = search_smallness_events(c.covariance(), c.solver, eps, a.T, a.max_trials,
                                             c.noise.seed, c.domain, "chained", a.n_chains,
                                             a.burn_in, a.sync_tol, a.S0, a.S_max, a.spread)
            if search.events:
                st = stepper_for(c.domain, c.solver)
                base = np.stack([e.record.states for e in search.events], axis=1)
                h = propagate_frames(st, base, np.broadcast_to(
                    np.eye(a.k_probe, c.domain.N), (len(search.events), a.k_probe, c.domain.N)))
                cond = h.log_sv[-1, :, : a.k_max] / h.times[-1]
            else:
                cond = np.zeros((0, a.k_max))
            for k in range(a.k_max):
                rows.append([alpha, k + 1, "conditional", cond.shape[0], *_quantiles(cond[:, k])])
        except Exception as exc:  # per-alpha failures are reported, not fatal
            log.warning("alpha=%g failed: %s", alpha, exc)
            errors[repr(float(alpha))] = str(exc)
    summary = {"alpha_grid": grid, "errors": errors, "k_max": a.k_max}
    rep = RunReport("sweep", cfg.config_hash, summary, {
        "quantiles": (["alpha", "k", "kind", "n", "q05", "q50", "q95"], rows)})
    rep.failed = bool(grid) and len(errors) == len(grid)
    return rep


def envelope_events(cfg: ExperimentConfig, events, seed: int = 0) -> list:
    """Envelope check on each event; the OU part starts from 0 at the window start."""
    out = []
    for e in events:
        z = ou_path(e.path, 0.0, e.T, cfg.solver.alpha, cfg.domain)
        eta = float(np.max(np.sqrt(np.sum(cfg.domain.eigenvalues() * z * z, axis=-1))))
        out.append(gronwall_envelope_check(e.record, z, eta, cfg.solver, seed=seed))
    return out

