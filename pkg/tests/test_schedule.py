"""Noise schedule: table construction, forward noising, reverse steps."""

import numpy as np
import pytest

from draftdiff import schedule as S
from draftdiff.tensor import Tensor


@pytest.fixture(scope="module")
def sched():
    return S.build_linear(1000, 1e-4, 0.02)


class TestBuildLinear:
    def test_endpoints(self, sched):
        assert sched.beta[0] == pytest.approx(1e-4)
        assert sched.beta[999] == pytest.approx(0.02)

    def test_single_step(self):
        s = S.build_linear(1, 0.1, 0.1)
        np.testing.assert_allclose(s.alpha_bar, [0.9])

    def test_alpha_bar_golden(self, sched):
        # frozen from a 40-digit log-sum oracle, 6 significant digits
        assert sched.alpha_bar[999] == pytest.approx(4.03583e-5, rel=1e-5)

    def test_alpha_bar_recurrence(self, sched):
        np.testing.assert_allclose(
            sched.alpha_bar[1:], sched.alpha_bar[:-1] * sched.alpha[1:], rtol=1e-14
        )
        assert sched.alpha_bar[0] == sched.alpha[0]

    @pytest.mark.parametrize("T", [1, 2, 7, 100, 1000])
    def test_alpha_bar_strictly_decreasing(self, T):
        s = S.build_linear(T)
        assert np.all(np.diff(s.alpha_bar) < 0) or T == 1
        assert np.all((s.beta > 0) & (s.beta < 1))

    def test_invalid_range_rejected(self):
        with pytest.raises(ValueError):
            S.build_linear(10, 0.0, 0.02)
        with pytest.raises(ValueError):
            S.build_linear(10, 0.02, 0.01)
        with pytest.raises(ValueError):
            S.build_linear(0)

    def test_ddim_timesteps(self, sched):
        ts = sched.ddim_timesteps(100)
        assert len(ts) == 100 and ts[0] == 1000 and ts[-1] == 10
        assert all(a - b == 10 for a, b in zip(ts, ts[1:]))
        with pytest.raises(ValueError):
            sched.ddim_timesteps(3)


class TestQSample:
    def test_zero_noise(self, sched):
        x0 = Tensor(np.full((2, 3), 0.5, np.float32))
        out = S.q_sample(x0, 400, Tensor(np.zeros((2, 3), np.float32)), sched)
        np.testing.assert_allclose(
            out.data, np.sqrt(sched.alpha_bar[399]) * 0.5, rtol=1e-6
        )

    def test_near_identity_at_t1(self):
        s = S.build_linear(1000, 1e-8, 1e-7)
        x0 = Tensor(np.ones((4,), np.float32))
        out = S.q_sample(x0, 1, Tensor(np.ones((4,), np.float32)), s)
        np.testing.assert_allclose(out.data, 1.0, atol=1e-3)

    def test_out_of_range(self, sched):
        x = Tensor(np.zeros(3, np.float32))
        for t in (0, 1001, -5):
            with pytest.raises(ValueError):
                S.q_sample(x, t, x, sched)

    def test_monte_carlo_variance(self, sched):
        rng = np.random.default_rng(123)
        x0 = Tensor(np.zeros(100_000, np.float32))
        out = S.q_sample(x0, 500, Tensor(rng.standard_normal(100_000)), sched)
        var = out.data.astype(np.float64).var()
        expected = 1.0 - sched.alpha_bar[499]
        assert abs(var - expected) / expected < 0.02


class TestDdpmStep:
    def test_no_noise_limit(self):
        s = S.build_linear(10, 1e-9, 1e-8)
        xt = Tensor(np.array([0.3, -0.2], np.float32))
        zero = Tensor(np.zeros(2, np.float32))
        out = S.ddpm_step(xt, zero, 5, zero, s)
        np.testing.assert_allclose(out.data, xt.data, atol=1e-6)

    def test_t1_deterministic_with_zero_z(self, sched):
        xt = Tensor(np.array([1.0], np.float32))
        eps = Tensor(np.array([0.5], np.float32))
        zero = Tensor(np.zeros(1, np.float32))
        a = S.ddpm_step(xt, eps, 1, zero, sched)
        b = S.ddpm_step(xt, eps, 1, zero, sched)
        np.testing.assert_array_equal(a.data, b.data)

    def test_scalar_oracle(self, sched):
        rng = np.random.default_rng(77)
        t = 321
        xt, eps, z = rng.normal(size=3)
        out = S.ddpm_step(
            Tensor(np.array([xt], np.float32)),
            Tensor(np.array([eps], np.float32)),
            t,
            Tensor(np.array([z], np.float32)),
            sched,
        )
        # independent scalar re-derivation of the posterior mean + noise
        beta = sched.beta[t - 1]
        ab = sched.alpha_bar[t - 1]
        ab_prev = sched.alpha_bar[t - 2]
        mu = (np.float32(xt) - np.float32(eps) * beta / np.sqrt(1 - ab)) / np.sqrt(1 - beta)
        sig = np.sqrt(beta * (1 - ab_prev) / (1 - ab))
        assert out.data[0] == pytest.approx(mu + sig * np.float32(z), abs=1e-6)


class TestDdimStep:
    def test_tprev0_returns_x0_hat(self, sched):
        rng = np.random.default_rng(5)
        x0 = Tensor(rng.normal(size=(8,)).astype(np.float32))
        eps = Tensor(rng.normal(size=(8,)).astype(np.float32))
        t = 700
        xt = S.q_sample(x0, t, eps, sched)
        rec = S.ddim_step(xt, eps, t, 0, sched)
        np.testing.assert_allclose(rec.data, x0.data, atol=1e-5)

    def test_ordering_violation(self, sched):
        x = Tensor(np.zeros(2, np.float32))
        with pytest.raises(ValueError):
            S.ddim_step(x, x, 10, 10, sched)
        with pytest.raises(ValueError):
            S.ddim_step(x, x, 10, 20, sched)
        with pytest.raises(ValueError):
            S.ddim_step(x, x, 10, -1, sched)

    def test_scalar_oracle(self, sched):
        rng = np.random.default_rng(6)
        xt, eps = rng.normal(size=2)
        t, tp = 500, 450
        out = S.ddim_step(
            Tensor(np.array([xt], np.float32)),
            Tensor(np.array([eps], np.float32)),
            t,
            tp,
            sched,
        )
        ab_t, ab_p = sched.alpha_bar[t - 1], sched.alpha_bar[tp - 1]
        x0h = (xt - np.sqrt(1 - ab_t) * eps) / np.sqrt(ab_t)
        want = np.sqrt(ab_p) * x0h + np.sqrt(1 - ab_p) * eps
        assert out.data[0] == pytest.approx(want, abs=1e-6)


def test_composition_single_vs_direct(sched):
    # iterated one-step noising matches the closed-form jump in distribution
    rng = np.random.default_rng(99)
    n = 10_000
    t = 60
    x0 = np.full(n, 0.7)
    x = x0.copy()
    for k in range(1, t + 1):
        x = np.sqrt(sched.alpha[k - 1]) * x + np.sqrt(sched.beta[k - 1]) * rng.standard_normal(n)
    direct = S.q_sample(
        Tensor(np.full(n, 0.7, np.float32)), t, Tensor(rng.standard_normal(n)), sched
    ).data.astype(np.float64)
    assert abs(x.mean() - direct.mean()) < 0.03
    assert abs(x.var() / direct.var() - 1.0) < 0.03


def test_eps_for_x0_clip_is_identity_when_within_bounds(sched):
    rng = np.random.default_rng(8)
    x0 = Tensor(rng.uniform(0.2, 0.8, size=(16,)).astype(np.float32))
    eps = Tensor(rng.standard_normal(16).astype(np.float32))
    xt = S.q_sample(x0, 300, eps, sched)
    adj = S.eps_for_x0_clip(xt, 300, sched, 0.0, 1.0, eps)
    np.testing.assert_allclose(adj.data, eps.data, atol=1e-4)
