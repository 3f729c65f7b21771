from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chafee_ftle.dynamics import (
    BlowUpError,
    Scheme,
    SolverConfig,
    TrajectoryRecord,
    cutoff_weight,
    integrate,
    step_random_pde,
    step_spde,
    step_variational,
    stepper_for,
)
from chafee_ftle.noise import CovarianceSpec, OuState, PathSource, ou_path, sample_path, wiener_shift
from chafee_ftle.spectral import DomainSpec, SpectralField, basis_for

DOM = DomainSpec(N=16)
COV = CovarianceSpec.power_law(DOM, gamma=2.0, amplitude=1.0)
CFG = SolverConfig(dt=1e-3, alpha=2.0)
LINEAR = SolverConfig(dt=0.1, alpha=0.0, cutoff_radius=0.0)


def rand_field(rng, scale=1.0):
    return SpectralField(scale * rng.standard_normal(DOM.N) / np.arange(1, DOM.N + 1) ** 2, DOM)


class TestSolverConfig:
    @pytest.mark.parametrize("kw", [{"dt": 0.0}, {"dt": -1e-3}, {"alpha": math.inf},
                                    {"cutoff_radius": -1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SolverConfig(**kw)

    def test_cutoff_ramp(self):
        th, dth = cutoff_weight(np.array([0.5, 1.0, 1.5, 2.0, 3.0]))
        np.testing.assert_allclose(th, [1, 1, 0.5, 0, 0])
        np.testing.assert_allclose(dth, [0, 0, -1.5, 0, 0])


class TestStepSpde:
    def test_linear_mode(self):
        u = step_spde(SpectralField.mode(1, DOM), np.zeros(DOM.N), SolverConfig(dt=0.1, alpha=0.0, cutoff_radius=0.0))
        assert u.coeffs[0] == pytest.approx(math.exp(-0.1), rel=1e-15)

    def test_semi_implicit_linear_mode(self):
        cfg = SolverConfig(dt=0.1, alpha=0.0, scheme=Scheme.SEMI_IMPLICIT_EULER, cutoff_radius=0.0)
        u = step_spde(SpectralField.mode(1, DOM), np.zeros(DOM.N), cfg)
        assert u.coeffs[0] == pytest.approx(1 / 1.1, rel=1e-15)

    def test_energy_decreases_without_noise(self, rng):
        cfg = SolverConfig(dt=1e-3, alpha=0.5)
        path = sample_path(CovarianceSpec.zero(DOM), cfg.dt, 0.0, 2.0, 0)
        rec = integrate(rand_field(rng, 3.0), path, 0.0, 2.0, cfg)
        h = basis_for(DOM).h_norm(rec.states)
        assert np.all(np.diff(h) < 0)

    def test_reflection_equivariance(self, rng):
        path = sample_path(COV, CFG.dt, 0.0, 1.0, 3)
        neg = type(path)(path.dt, path.i_min, -path.increments)
        u0 = rand_field(rng)
        a = integrate(u0, path, 0.0, 1.0, CFG)
        b = integrate(-u0, neg, 0.0, 1.0, CFG)
        np.testing.assert_array_equal(a.states, -b.states)

    def test_blow_up_detected(self):
        cfg = SolverConfig(dt=0.5, alpha=0.0, scheme=Scheme.SEMI_IMPLICIT_EULER)
        path = sample_path(CovarianceSpec.zero(DOM), 0.5, 0.0, 20.0, 0)
        with pytest.raises(BlowUpError):
            integrate(SpectralField.mode(1, DOM, 40.0), path, 0.0, 20.0, cfg)


class TestRandomPde:
    def test_zero_ou_matches_spde(self, rng):
        u = rand_field(rng)
        z = OuState(SpectralField.zeros(DOM), CFG.alpha)
        a = step_random_pde(u, z, CFG)
        b = step_spde(u, np.zeros(DOM.N), CFG)
        np.testing.assert_array_equal(a.coeffs, b.coeffs)

    def test_linear_exact(self, rng):
        u = rand_field(rng)
        out = u
        for _ in range(10):
            out = step_random_pde(out, SpectralField.zeros(DOM), LINEAR)
        np.testing.assert_allclose(out.coeffs, np.exp(-DOM.eigenvalues()) * u.coeffs, rtol=1e-13)

    def test_consistency_with_spde(self, rng):
        """u~ + z reproduces u; with the left-point OU update the match is exact."""
        u0 = rand_field(rng)
        errs = []
        src = PathSource(COV, 2e-3, 31)
        for s in (src, src.refined()):
            cfg = CFG.with_dt(s.dt)
            dW = s.window(0.0, 1.0)
            st_ = stepper_for(DOM, cfg)
            u = st_.evolve(u0.coeffs, dW)
            path = type(sample_path(COV, s.dt, 0, 0, 0))(s.dt, 0, dW)
            z = ou_path(path, 0.0, 1.0, cfg.alpha, DOM)
            ut = u0.coeffs.copy()
            err = 0.0
            for i in range(dW.shape[0]):
                ut = st_.random_pde(ut, z[i])
                err = max(err, basis_for(DOM).h_norm(ut + z[i + 1] - u[i + 1]))
            errs.append(err)
        assert max(errs) < 1e-12


class TestVariational:
    def test_zero_base(self):
        v = SpectralField.mode(1, DOM)
        out = step_variational(v, SpectralField.zeros(DOM), CFG)
        assert out.coeffs[0] == pytest.approx(math.exp((CFG.alpha - 1) * CFG.dt), rel=1e-15)

    @given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**32))
    @settings(max_examples=25, deadline=None)
    def test_linearity(self, a, b, seed):
        r = np.random.default_rng(seed)
        base, v, w = rand_field(r), rand_field(r), rand_field(r)
        lhs = step_variational(a * v + b * w, base, CFG).coeffs
        rhs = (a * step_variational(v, base, CFG) + b * step_variational(w, base, CFG)).coeffs
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12 * (1 + np.abs(rhs).max()))

    def test_operator_norm_at_zero_base(self):
        st_ = stepper_for(DOM, CFG)
        J = st_.variational(np.eye(DOM.N), np.zeros(DOM.N))
        assert np.linalg.norm(J, 2) <= math.exp((CFG.alpha - 1) * CFG.dt) * (1 + 1e-10)

    def test_finite_difference_slope(self, rng):
        path = sample_path(COV, CFG.dt, 0.0, 0.5, 8)
        st_ = stepper_for(DOM, CFG)
        u0 = rand_field(rng).coeffs
        v0 = rand_field(rng).coeffs
        dW = path.window(0.0, 0.5)
        base = st_.evolve(u0, dW)
        v = v0.copy()
        for i in range(dW.shape[0]):
            v = st_.variational(v[None], base[i])[0]
        errs = []
        for h in (1e-3, 1e-4, 1e-5):
            fd = (st_.evolve(u0 + h * v0, dW, record=False) - base[-1]) / h
            errs.append(np.linalg.norm(fd - v))
        slopes = np.diff(np.log10(errs))
        assert np.all(slopes < -0.8)


class TestIntegrate:
    path = sample_path(COV, CFG.dt, -1.0, 3.0, 12)

    def test_empty_interval(self, rng):
        u0 = rand_field(rng)
        rec = integrate(u0, self.path, 0.5, 0.5, CFG)
        assert rec.final == u0

    def test_cocycle(self, rng):
        u0 = rand_field(rng)
        full = integrate(u0, self.path, 0.0, 2.0, CFG)
        half = integrate(u0, self.path, 0.0, 1.0, CFG)
        again = integrate(half.final, wiener_shift(self.path, 1.0), 0.0, 1.0, CFG)
        np.testing.assert_array_equal(full.final.coeffs, again.final.coeffs)

    def test_strong_self_convergence(self, rng):
        """||u^dt(1) - u^{dt/2}(1)|| drops by >= 1.7 when dt halves."""
        u0 = rand_field(rng)
        d1, d2 = [], []
        for m in range(10):
            src = PathSource(COV, 4e-3, 1000 + m)
            levels = [src, src.refined(), src.refined().refined()]
            u = [stepper_for(DOM, CFG.with_dt(s.dt)).evolve(u0.coeffs, s.window(0.0, 1.0), record=False)
                 for s in levels]
            d1.append(np.linalg.norm(u[0] - u[1]))
            d2.append(np.linalg.norm(u[1] - u[2]))
        diffs = [np.mean(d1), np.mean(d2)]
        assert diffs[0] / diffs[1] >= 1.7

    def test_order_preservation(self):
        b = basis_for(DOM)
        lo = SpectralField.mode(1, DOM, -2.0)
        hi = SpectralField.mode(1, DOM, 2.0)
        assert np.all(b.to_grid(lo.coeffs) <= b.to_grid(hi.coeffs))
        a = integrate(lo, self.path, 0.0, 1.0, CFG)
        c = integrate(hi, self.path, 0.0, 1.0, CFG)
        assert np.all(b.to_grid(a.states) <= b.to_grid(c.states) + 1e-6)

    def test_large_cutoff_is_bit_identical(self, rng):
        u0 = rand_field(rng)
        raw = integrate(u0, self.path, 0.0, 1.0, CFG)
        cut = integrate(u0, self.path, 0.0, 1.0, SolverConfig(CFG.dt, CFG.alpha, cutoff_radius=1e6))
        np.testing.assert_array_equal(raw.states, cut.states)

    def test_dt_mismatch(self, rng):
        with pytest.raises(ValueError):
            integrate(rand_field(rng), self.path, 0.0, 1.0, CFG.with_dt(2e-3))

    def test_record_round_trip(self, rng, tmp_path):
        rec = integrate(rand_field(rng), self.path, 0.0, 0.01, CFG)
        rec.save(tmp_path / "r.npz")
        back = TrajectoryRecord.load(tmp_path / "r.npz")
        np.testing.assert_array_equal(back.states, rec.states)
        np.testing.assert_allclose(rec.v_norms, basis_for(DOM).v_norm(rec.states))
        rec.to_csv(tmp_path / "r.csv")
        assert (tmp_path / "r.csv").read_text().startswith("time,mode,coefficient")
