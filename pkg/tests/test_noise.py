from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chafee_ftle.noise import (
    ConfigurationError,
    CovarianceSpec,
    NoisePath,
    OuState,
    PathSource,
    derive_seed,
    ou_path,
    ou_step,
    sample_path,
    wiener_shift,
)
from chafee_ftle.spectral import DomainSpec, SpectralField

DOM = DomainSpec(N=16)
COV = CovarianceSpec.power_law(DOM, gamma=2.0, amplitude=1.0)
DT = 1e-3


@pytest.fixture(scope="module")
def long_path():
    return sample_path(COV, DT, 0.0, 100.0, seed=7, domain=DOM)


class TestCovariance:
    def test_power_law(self):
        np.testing.assert_allclose(COV.q, DOM.eigenvalues() ** -2.0)

    def test_negative_rejected(self):
        with pytest.raises(ConfigurationError):
            CovarianceSpec(np.array([1.0, -1.0]))

    def test_heavy_tail_rejected(self):
        flat = CovarianceSpec(np.ones(DOM.N))
        with pytest.raises(ConfigurationError):
            flat.validate(DOM)
        with pytest.raises(ConfigurationError):
            sample_path(flat, DT, 0.0, 1.0, 0, domain=DOM)

    def test_default_profile_valid_at_production_size(self):
        d = DomainSpec(N=64)
        CovarianceSpec.power_law(d, gamma=1.0).validate(d)

    def test_size_mismatch(self):
        with pytest.raises(ConfigurationError):
            COV.validate(DomainSpec(N=8))


class TestSamplePath:
    def test_zero_covariance(self):
        p = sample_path(CovarianceSpec.zero(DOM), DT, -1.0, 1.0, 3)
        assert p.n_steps == 2000 and not np.any(p.increments)

    def test_mean(self, long_path):
        x = long_path.increments[:, 0]
        assert abs(x.mean()) <= 4 * math.sqrt(COV.q[0] * DT / x.size)

    @pytest.mark.parametrize("k", [0, 3, 15])
    def test_variance(self, long_path, k):
        x = long_path.increments[:, k]
        assert x.var() == pytest.approx(COV.q[k] * DT, rel=0.05)

    def test_lag_one_autocorrelation(self, long_path):
        x = long_path.increments[:, 1]
        r = np.corrcoef(x[:-1], x[1:])[0, 1]
        assert abs(r) <= 4 / math.sqrt(x.size)

    def test_reproducible(self):
        a = sample_path(COV, DT, -2.0, 3.0, 11)
        b = sample_path(COV, DT, -2.0, 3.0, 11)
        np.testing.assert_array_equal(a.increments, b.increments)

    def test_extending_past_keeps_overlap(self):
        short = sample_path(COV, DT, -1.0, 1.0, 5)
        long = sample_path(COV, DT, -7.5, 2.0, 5)
        np.testing.assert_array_equal(short.window(-1.0, 1.0), long.window(-1.0, 1.0))

    def test_distinct_seeds_differ(self):
        a = sample_path(COV, DT, 0.0, 1.0, 1)
        b = sample_path(COV, DT, 0.0, 1.0, 2)
        assert not np.array_equal(a.increments, b.increments)

    @pytest.mark.parametrize("t_min,t_max", [(0.5, 1.0), (-1.0, -0.5)])
    def test_must_contain_zero(self, t_min, t_max):
        with pytest.raises(ConfigurationError):
            sample_path(COV, DT, t_min, t_max, 0)

    def test_window_out_of_range(self):
        p = sample_path(COV, DT, -1.0, 1.0, 0)
        with pytest.raises(IndexError):
            p.window(-2.0, 0.0)

    def test_csv_and_binary_round_trip(self, tmp_path):
        p = sample_path(COV, 0.1, -0.5, 0.5, 9)
        p.to_csv(tmp_path / "p.csv")
        q = NoisePath.from_csv(tmp_path / "p.csv", 0.1)
        np.testing.assert_array_equal(p.increments, q.increments)
        assert q.i_min == p.i_min
        p.save(tmp_path / "p.npz")
        r = NoisePath.load(tmp_path / "p.npz")
        np.testing.assert_array_equal(p.increments, r.increments)
        assert r.seed == 9


class TestShift:
    path = sample_path(COV, DT, -3.0, 3.0, 21)

    def test_identity(self):
        s = wiener_shift(self.path, 0.0)
        assert s.i_min == self.path.i_min
        np.testing.assert_array_equal(s.increments, self.path.increments)

    def test_group(self):
        back = wiener_shift(wiener_shift(self.path, -DT), DT)
        assert back.i_min == self.path.i_min
        np.testing.assert_array_equal(back.window(-1, 1), self.path.window(-1, 1))

    @given(st.integers(-1000, 1000), st.integers(-1000, 1000))
    @settings(max_examples=40, deadline=None)
    def test_composition(self, a, b):
        t, s = a * DT, b * DT
        lhs = wiener_shift(wiener_shift(self.path, s), t)
        rhs = wiener_shift(self.path, s + t)
        assert lhs.i_min == rhs.i_min

    @given(st.integers(-1500, 1500), st.integers(0, 1500))
    @settings(max_examples=40, deadline=None)
    def test_cumulative_identity(self, si, ti):
        s, t = si * DT, ti * DT
        shifted = wiener_shift(self.path, s)
        lhs = self.path.value(t + s) - self.path.value(s)
        np.testing.assert_allclose(shifted.value(t), lhs, atol=1e-12)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            wiener_shift(self.path, 4.0)


class TestSources:
    def test_source_matches_sample_path(self):
        src = PathSource(COV, DT, 99)
        p = sample_path(COV, DT, -2.0, 2.0, 99)
        np.testing.assert_array_equal(src.window(-1.3, 0.7), p.window(-1.3, 0.7))

    def test_refined_sums_to_coarse(self):
        src = PathSource(COV, DT, 4)
        fine = src.refined().window(-0.5, 0.5)
        coarse = src.window(-0.5, 0.5)
        np.testing.assert_allclose(fine.reshape(-1, 2, DOM.N).sum(axis=1), coarse, atol=1e-15)

    def test_refined_variance(self):
        fine = PathSource(COV, DT, 4).refined().window(0.0, 50.0)
        assert fine[:, 0].var() == pytest.approx(COV.q[0] * DT / 2, rel=0.05)

    def test_derive_seed(self):
        assert derive_seed(1, 2) == derive_seed(1, 2)
        assert len({derive_seed(0, i) for i in range(1000)}) == 1000


class TestOu:
    def test_deterministic_decay(self):
        d = DomainSpec(N=2)
        z = OuState(SpectralField([1.0, 0.0], d), alpha=0.0)
        out = ou_step(z, np.zeros(2), 0.1)
        assert out.z.coeffs[0] == pytest.approx(math.exp(-0.1), rel=1e-15)

    def test_zero_noise(self):
        p = sample_path(CovarianceSpec.zero(DOM), DT, 0.0, 1.0, 0)
        assert not np.any(ou_path(p, 0.0, 1.0, 0.5, DOM))

    def test_stationary_variance(self):
        alpha = 0.5
        p = sample_path(COV, 0.01, 0.0, 4000.0, 17)
        z = ou_path(p, 0.0, 4000.0, alpha, DOM, exact_variance=True)[50_000:]
        target = OuState(SpectralField.zeros(DOM), alpha).stationary_variance(COV)
        np.testing.assert_allclose(z[:, :3].var(axis=0), target[:3], rtol=0.05)

    def test_stationary_requires_stable_modes(self):
        with pytest.raises(ConfigurationError):
            OuState(SpectralField.zeros(DOM), 2.0).stationary_variance(COV)
