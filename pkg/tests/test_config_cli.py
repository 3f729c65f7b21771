from __future__ import annotations

import json

import pytest

from chafee_ftle.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUN_FAILED, main
from chafee_ftle.config import ConfigurationError, ExperimentConfig, load_config, parse_config
from chafee_ftle.dynamics import Scheme
from chafee_ftle.experiments import run_attractor, run_upper_bounds
from chafee_ftle.spectral import BasisConvention

SMALL = """
domain.N = 16
noise.gamma = 2.0
solver.alpha = 2.0
noise.ensemble_size = 3
analysis.T = 0.1
analysis.k_max = 2
analysis.k_probe = 4
analysis.chunk_size = 1
"""


def tables_equal(a, b) -> bool:
    # repr makes NaN entries compare equal
    return repr(a) == repr(b)


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL)
    return path


class TestParsing:
    def test_defaults(self):
        cfg = parse_config("")
        assert cfg == ExperimentConfig()
        assert cfg.domain.N == 64 and cfg.solver.dt == 1e-3
        assert cfg.domain.basis_convention is BasisConvention.PAPER_TWO_PI

    def test_values(self):
        cfg = parse_config("""
            # comment
            solver.alpha = 1.5   # trailing
            solver.scheme = semi_implicit_euler
            noise.q = none
            analysis.epsilon = 0.2
            analysis.alpha_grid = 0.5, 1.5, 2.5
            output.formats = json
        """.replace("semi_implicit_euler", Scheme.SEMI_IMPLICIT_EULER.value))
        assert cfg.solver.alpha == 1.5
        assert cfg.solver.scheme is Scheme.SEMI_IMPLICIT_EULER
        assert cfg.analysis.alpha_grid == (0.5, 1.5, 2.5)
        assert cfg.output.formats == ("json",)

    @pytest.mark.parametrize("text", [
        "solver.bogus = 1",
        "nosection.alpha = 1",
        "solver.alpha = 1\nsolver.alpha = 2",
        "solver.alpha",
        "alpha = 1",
        "domain.N = 8.5",
        "solver.alpha = nan",
        "analysis.k_max = 9\nanalysis.k_probe = 8",
        "analysis.T = 0.0005",
        "noise.gamma = 0.2",
        "solver.dt = -1",
    ])
    def test_errors(self, text):
        with pytest.raises(ConfigurationError):
            parse_config(text)

    def test_hash_stable_under_formatting(self):
        a = parse_config("solver.alpha = 2\nnoise.seed = 4")
        b = parse_config("noise.seed=4   # same\n\nsolver.alpha = 2.0")
        assert a.config_hash == b.config_hash
        assert a.config_hash != parse_config("solver.alpha = 2.5").config_hash

    def test_canonical_round_trip(self):
        cfg = parse_config(SMALL)
        assert parse_config(cfg.canonical()) == cfg

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_config(tmp_path / "missing.cfg")


class TestCli:
    def test_selftest(self, capsys):
        assert main(["selftest"]) == EXIT_OK
        out = capsys.readouterr().out
        assert out.count("PASS") == 3 and "FAIL" not in out

    def test_config_error(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("solver.alpha = x")
        assert main(["attractor", "--config", str(bad)]) == EXIT_CONFIG
        assert main(["attractor", "--config", str(tmp_path / "none.cfg")]) == EXIT_CONFIG

    def test_bad_arguments(self, small_cfg):
        assert main(["attractor", "--config", str(small_cfg), "--seed", "-1"]) == EXIT_CONFIG
        assert main(["attractor", "--config", str(small_cfg), "--workers", "0"]) == EXIT_CONFIG
        with pytest.raises(SystemExit):
            main(["nonsense"])

    def test_attractor_run(self, small_cfg, tmp_path):
        out = tmp_path / "out"
        assert main(["attractor", "--config", str(small_cfg), "--out", str(out)]) == EXIT_OK
        summary = json.loads((out / "attractor_summary.json").read_text())
        assert summary["succeeded"] == 3 and summary["run_failed"] is False
        assert summary["config_hash"] == load_config(small_cfg).config_hash
        assert (out / "attractor_members.csv").read_text().startswith("# config_hash:")

    def test_upper_bounds_run(self, small_cfg, tmp_path):
        code = main(["upper-bounds", "--config", str(small_cfg), "--out", str(tmp_path), "--dt-refine"])
        assert code == EXIT_OK
        summary = json.loads((tmp_path / "upper_bounds_summary.json").read_text())
        assert "worst_margin_dt2" in summary

    def test_rejection_exhausted(self, tmp_path):
        cfg = tmp_path / "ev.cfg"
        cfg.write_text(SMALL + "analysis.epsilon = 1e-9\nanalysis.max_trials = 3\n"
                       "analysis.n_chains = 3\nanalysis.burn_in = 10\n")
        assert main(["lower-bound-event", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_RUN_FAILED
        summary = json.loads((tmp_path / "lower_bound_event_summary.json").read_text())
        assert summary["accepted"] == 0 and "error" in summary

    def test_too_many_failures(self, tmp_path):
        cfg = tmp_path / "f.cfg"
        cfg.write_text(SMALL + "analysis.sync_tol = 1e-30\nanalysis.S0 = 1\nanalysis.S_max = 1\n")
        assert main(["attractor", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_RUN_FAILED

    def test_empty_sweep(self, small_cfg, tmp_path):
        assert main(["sweep", "--config", str(small_cfg), "--out", str(tmp_path)]) == EXIT_OK
        lines = (tmp_path / "sweep_quantiles.csv").read_text().splitlines()
        assert lines[-1] == "alpha,k,kind,n,q05,q50,q95"

    def test_seed_override(self, small_cfg, tmp_path):
        main(["attractor", "--config", str(small_cfg), "--seed", "99", "--out", str(tmp_path)])
        summary = json.loads((tmp_path / "attractor_summary.json").read_text())
        assert summary["config_hash"] != load_config(small_cfg).config_hash


class TestWorkers:
    def test_attractor_independent_of_workers(self, small_cfg):
        cfg = load_config(small_cfg)
        one = run_attractor(cfg, workers=1)
        two = run_attractor(cfg, workers=2)
        assert tables_equal(one.tables, two.tables)

    def test_upper_bounds_independent_of_workers(self, small_cfg):
        cfg = load_config(small_cfg)
        one = run_upper_bounds(cfg, workers=1)
        two = run_upper_bounds(cfg, workers=2)
        assert one.summary == two.summary
        assert tables_equal(one.tables, two.tables)
