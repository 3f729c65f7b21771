from __future__ import annotations

import math

import numpy as np
import pytest

from chafee_ftle.dynamics import SolverConfig, integrate, stepper_for
from chafee_ftle.exterior import wedge_norm_of_operator
from chafee_ftle.lyapunov import (
    DegenerateFrameError,
    TangentFrame,
    ftle_top,
    propagate_frame,
    propagate_frames,
    upper_bound_lines,
    volume_growth,
)
from chafee_ftle.noise import CovarianceSpec, sample_path
from chafee_ftle.spectral import DomainSpec, SpectralField

DOM = DomainSpec(N=16)
COV = CovarianceSpec.power_law(DOM, gamma=2.0, amplitude=2.0)
CFG = SolverConfig(dt=1e-3, alpha=2.0)
T_GRID = np.linspace(0.1, 1.0, 10)


@pytest.fixture(scope="module")
def path():
    return sample_path(COV, CFG.dt, 0.0, 2.0, 5)


@pytest.fixture(scope="module")
def u0():
    c = np.zeros(DOM.N)
    c[:4] = [1.2, -0.4, 0.3, 0.1]
    return SpectralField(c, DOM)


def linear_cfg(alpha):
    return SolverConfig(dt=1e-3, alpha=alpha, cutoff_radius=0.0)


class TestTangentFrame:
    def test_linear_case_exact(self, path, u0):
        cfg = linear_cfg(1.5)
        rec = integrate(u0, path, 0.0, 1.0, cfg)
        f = propagate_frame(TangentFrame.leading(3, DOM), rec, 0.0, 1.0, cfg)
        np.testing.assert_allclose(f.log_r, 1.5 - DOM.eigenvalues()[:3], atol=1e-9)
        assert f.log_volume == pytest.approx(float(np.sum(f.log_r)))
        assert f.t_elapsed == pytest.approx(1.0)

    def test_split_propagation_matches(self, path, u0):
        rec = integrate(u0, path, 0.0, 1.0, CFG)
        whole = propagate_frame(TangentFrame.leading(3, DOM), rec, 0.0, 1.0, CFG)
        half = propagate_frame(TangentFrame.leading(3, DOM), rec, 0.0, 0.4, CFG)
        rest = propagate_frame(half, rec, 0.4, 1.0, CFG)
        np.testing.assert_allclose(rest.log_r, whole.log_r, atol=1e-12)
        assert rest.log_top_singular_value() == pytest.approx(whole.log_top_singular_value(), abs=1e-12)

    def test_orthonormal_after_propagation(self, path, u0):
        rec = integrate(u0, path, 0.0, 1.0, CFG)
        f = propagate_frame(TangentFrame.leading(4, DOM), rec, 0.0, 1.0, CFG, reorth_every=7)
        assert f.orthonormality_error() < 1e-10

    def test_top_stretch_bound(self, path, u0):
        rec = integrate(u0, path, 0.0, 1.0, CFG)
        st = stepper_for(DOM, CFG)
        h = propagate_frames(st, rec.states, np.eye(1, DOM.N))
        bound = (CFG.alpha - 1.0) * h.times
        assert np.all(np.exp(h.log_r[:, 0] - bound) <= 1 + 1e-6)

    def test_reorthonormalization_frequency(self, path, u0):
        rec = integrate(u0, path, 0.0, 1.0, CFG)
        vols = [propagate_frame(TangentFrame.leading(3, DOM), rec, 0.0, 1.0, CFG, r).log_volume
                for r in (1, 5, 25)]
        assert max(vols) - min(vols) < 1e-7

    def test_degenerate(self):
        e1 = SpectralField.mode(1, DOM)
        with pytest.raises(DegenerateFrameError):
            TangentFrame.from_fields([e1, 2 * e1])

    def test_rank_collapse_during_propagation(self):
        st = stepper_for(DOM, CFG)
        base = np.zeros((3, DOM.N))
        V0 = np.vstack([np.eye(1, DOM.N), np.eye(1, DOM.N)])
        with pytest.raises(DegenerateFrameError):
            propagate_frames(st, base, V0)

    def test_from_fields_records_stretch(self):
        f = TangentFrame.from_fields([SpectralField.mode(1, DOM, 3.0), SpectralField.mode(2, DOM, 0.5)])
        np.testing.assert_allclose(f.log_r, np.log([3.0, 0.5]))


class TestFtleTop:
    def test_linear(self, path, u0):
        rep = ftle_top(path, u0, T_GRID, linear_cfg(0.5))
        np.testing.assert_allclose(rep.lam[:, 0], 0.5 - 1.0, atol=1e-8)
        assert rep.probe_converged

    def test_stable_regime_bound(self, path, u0):
        cfg = SolverConfig(dt=1e-3, alpha=0.0)
        rep = ftle_top(path, u0, T_GRID, cfg, k_probe=4)
        assert rep.max_lambda1_violation() <= 0.02

    def test_probe_convergence_flag(self, path, u0):
        rep = ftle_top(path, u0, T_GRID, CFG, k_probe=8)
        assert rep.probe_converged is True
        assert rep.meta["k_probe"] == 8

    def test_finite_difference_cross_check(self, path, u0, rng):
        """Tangent growth of 16 random directions matches finite differences.

        The frame value is the operator norm, which dominates every direction.
        """
        t = 1.0
        st = stepper_for(DOM, CFG)
        dW = path.window(0.0, t)
        base = st.evolve(u0.coeffs, dW)
        rep = ftle_top(path, u0, [t], CFG, k_probe=8)
        W = rng.standard_normal((16, DOM.N))
        W /= np.linalg.norm(W, axis=1, keepdims=True)
        P = np.eye(DOM.N)
        for i in range(dW.shape[0]):
            P = st.variational(P, base[i])  # row i is D phi e_i
        tangent = np.log(np.linalg.norm(W @ P, axis=1)) / t
        eps = 1e-5
        fd = np.array([np.log(np.linalg.norm(st.evolve(u0.coeffs + eps * w, dW, record=False) - base[-1]) / eps) / t
                       for w in W])
        np.testing.assert_allclose(fd, tangent, atol=5e-3)
        assert rep.lam[0, 0] >= fd.max() - 5e-3

    def test_grid_must_be_on_steps(self, path, u0):
        with pytest.raises(ValueError):
            ftle_top(path, u0, [0.10005], CFG)


class TestVolumeGrowth:
    def test_linear(self, path, u0):
        rep = volume_growth(path, u0, 3, T_GRID, linear_cfg(2.0))
        expected = np.cumsum(2.0 - DOM.eigenvalues()[:3])
        np.testing.assert_allclose(rep.v, np.broadcast_to(expected, rep.v.shape), atol=1e-8)

    @pytest.mark.parametrize("k_probe", [None, 6])
    def test_volume_is_sum_of_exponents(self, path, u0, k_probe):
        rep = volume_growth(path, u0, 3, T_GRID, CFG, k_probe=k_probe)
        np.testing.assert_allclose(rep.v, np.cumsum(rep.lam, axis=1), atol=1e-9)
        np.testing.assert_allclose(rep.v[:, 0], rep.lam[:, 0], atol=0)

    def test_ordered_exponents(self, path, u0):
        rep = volume_growth(path, u0, 4, T_GRID, CFG, k_probe=8)
        assert np.all(np.diff(rep.lam, axis=1) <= 1e-12)

    def test_upper_bound(self, path, u0):
        rep = volume_growth(path, u0, 3, T_GRID, CFG, k_probe=8)
        assert np.all(rep.max_violation() <= np.arange(1, 4) * 0.02)

    def test_dense_jacobian_oracle(self):
        d = DomainSpec(N=6)
        cov = CovarianceSpec.power_law(d, gamma=3.0, amplitude=1.0)
        p = sample_path(cov, CFG.dt, 0.0, 1.0, 2)
        u0 = SpectralField(np.array([1.0, 0.5, -0.3, 0.2, 0.1, 0.05]), d)
        st = stepper_for(d, CFG)
        base = st.evolve(u0.coeffs, p.window(0.0, 1.0))
        J = np.eye(6)
        for i in range(base.shape[0] - 1):
            J = st.variational(J, base[i])  # rows are propagated unit vectors
        oracle = math.log(wedge_norm_of_operator(J.T, 2))
        rep = volume_growth(p, u0, 2, [1.0], CFG, k_probe=6)
        assert rep.v[0, 1] == pytest.approx(oracle, abs=1e-6)

    def test_csv(self, path, u0, tmp_path):
        rep = volume_growth(path, u0, 2, [0.5, 1.0], CFG)
        rep.to_csv(tmp_path / "f.csv", {"config_hash": "abc"})
        lines = (tmp_path / "f.csv").read_text().splitlines()
        assert lines[0] == "# config_hash: abc"
        assert lines[1] == "t,k,lambda_k,v_k,bound_k"
        assert len(lines) == 2 + 4

    def test_bound_lines(self):
        lb, vb = upper_bound_lines(2.0, DOM, 3)
        np.testing.assert_allclose(lb, [1.0, -2.0, -7.0])
        np.testing.assert_allclose(vb, [1.0, -1.0, -8.0])
