"""Command line driver.

Usage::

    chafee-ftle SUBCOMMAND [--config PATH] [--seed U64] [--workers N]
                           [--out DIR] [--dt-refine]

Subcommands: ``upper-bounds``, ``lower-bound-event``, ``sweep``,
``attractor``, ``selftest``.  Exit codes: 0 success, 2 configuration error,
3 run failure (too many failed ensemble members, no accepted event, or a
failed self test).
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import replace

import numpy as np

from .config import ConfigurationError, ExperimentConfig, load_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUN_FAILED = 3

log = logging.getLogger("chafee_ftle")


def _selftest() -> tuple[bool, list[str]]:
    from .dynamics import SolverConfig
    from .lyapunov import volume_growth
    from .noise import CovarianceSpec, sample_path
    from .special import mittag_leffler
    from .spectral import DomainSpec, SpectralField, basis_for

    lines = []
    ok = True

    def check(name, passed, detail):
        nonlocal ok
        ok &= bool(passed)
        lines.append(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")

    d = DomainSpec(N=16)
    b = basis_for(d)
    rng = np.random.default_rng(0)
    c = rng.standard_normal(d.N) / d.eigenvalues()
    x = np.linspace(0, d.L, 4001)
    u = SpectralField(c, d).evaluate(x)
    e = np.sqrt(2 / d.L) * np.sin(np.outer(np.arange(1, d.N + 1), x) * d.stride * np.pi / d.L)
    ref = np.trapezoid(e * u**3, x, axis=1)
    err = float(np.max(np.abs(ref - b.cubic(c))))
    check("dealiased cube", err < 1e-6, f"max error {err:.2e}")
    err = abs(float(mittag_leffler(1.0, 1.0)) - math.e)
    check("E_1(1) = e", err < 1e-12, f"error {err:.2e}")
    cfg = SolverConfig(alpha=2.0, cutoff_radius=0)
    p = sample_path(CovarianceSpec.power_law(d, 2, 1.0), cfg.dt, 0, 0.5, 1, d)
    r = volume_growth(p, SpectralField.mode(1, d), 3, [0.25, 0.5], cfg)
    err = float(np.max(np.abs(r.v - r.volume_bounds)))
    check("linear exactness", err < 1e-8, f"max error {err:.2e}")
    return ok, lines


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chafee-ftle", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=["upper-bounds", "lower-bound-event", "sweep",
                                        "attractor", "selftest"])
    p.add_argument("--config", metavar="PATH")
    p.add_argument("--seed", type=int, metavar="U64")
    p.add_argument("--workers", type=int, default=1, metavar="N")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--dt-refine", action="store_true",
                   help="repeat bound checks at dt/2 and compare violation margins")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "selftest":
        ok, lines = _selftest()
        print("\n".join(lines))
        return EXIT_OK if ok else EXIT_RUN_FAILED
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigurationError("--seed must be an unsigned 64-bit integer")
            cfg = replace(cfg, noise=replace(cfg.noise, seed=args.seed))
        if args.workers < 1:
            raise ConfigurationError("--workers must be >= 1")
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    from . import experiments as ex

    try:
        if args.command == "upper-bounds":
            rep = ex.run_upper_bounds(cfg, args.workers, args.dt_refine)
        elif args.command == "lower-bound-event":
            rep = ex.run_lower_bound_event(cfg, args.workers)
        elif args.command == "sweep":
            rep = ex.run_bifurcation_sweep(cfg, workers=args.workers)
        else:
            rep = ex.run_attractor(cfg, args.workers)
    except (ConfigurationError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or cfg.output.directory
    for path in rep.write(out, cfg.output.formats):
        log.info("wrote %s", path)
    if "error" in rep.summary:
        print(rep.summary["error"], file=sys.stderr)
    print(f"{rep.name}: {'FAILED' if rep.failed else 'ok'} (config {rep.config_hash}) -> {out}")
    return EXIT_RUN_FAILED if rep.failed else EXIT_OK
