import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from eve_rl.errors import ConfigError, ContractError
from eve_rl.nn import MlpNetwork, mlp_init
from eve_rl.posterior import (
    SCALE_HALF_RESIDUAL,
    SCALE_LOGLIK,
    SCALE_SQUARED_LOSS,
    FisherAccumulator,
    KroneckerBlock,
    epistemic_q_std,
    expected_residual_factor,
    sample_posterior,
    sample_posterior_batch,
    sample_posterior_subset,
    unvec,
    vec,
)


def random_spd(n, rng):
    M = rng.normal(size=(n, n))
    return M @ M.T + n * np.eye(n)


class TestFisherUpdate:
    def test_zero_gradient_only_decays(self):
        acc = FisherAccumulator(np.array([2.0, 4.0]), beta=0.1)
        acc.update(np.zeros(2))
        np.testing.assert_allclose(acc.diagonal, [1.8, 3.6])
        assert acc.m == pytest.approx(0.9 * 1 + 1)

    def test_running_sum_without_decay(self):
        f0 = np.array([0.5, 1.0, 0.0])
        g = np.array([1.0, -2.0, 3.0])
        acc = FisherAccumulator(f0.copy(), beta=0.0)
        for _ in range(7):
            acc.update(g)
        np.testing.assert_allclose(acc.diagonal, f0 + 7 * g * g)
        assert acc.m == 8.0

    def test_nonfinite_rejected_state_unchanged(self):
        acc = FisherAccumulator(np.ones(2), beta=0.5)
        before = acc.copy()
        with pytest.raises(ContractError):
            acc.update(np.array([np.nan, 1.0]))
        assert np.array_equal(acc.diagonal, before.diagonal) and acc.m == before.m

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            FisherAccumulator.zeros(3).update(np.ones(2))

    def test_bad_hyperparameters(self):
        with pytest.raises(ConfigError):
            FisherAccumulator.zeros(2, beta=1.0)
        with pytest.raises(ConfigError):
            FisherAccumulator.zeros(2, eps=0.0)
        with pytest.raises(ConfigError):
            FisherAccumulator.zeros(2, omega=-1.0)

    def test_gaussian_location_fisher_is_one(self):
        # log N(Z | theta, 1) has score (Z - theta); its variance is 1
        rng = np.random.default_rng(0)
        theta = 0.3
        z = rng.normal(theta, 1.0, size=100_000)
        acc = FisherAccumulator.zeros(1, beta=0.0)
        for zi in z:
            acc.update(np.array([zi - theta]))
        f = acc.unbiased()[0] * acc.m / (acc.m - 1)  # m starts at 1 with zero mass
        assert abs(f - 1.0) < 0.05
        assert f == pytest.approx(np.mean((z - theta) ** 2), rel=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), min_size=1, max_size=30),
           st.floats(0.0, 0.5))
    def test_diagonal_nonnegative(self, grads, beta):
        acc = FisherAccumulator.zeros(3, beta=beta)
        for g in grads:
            acc.update(np.array(g))
            assert np.all(acc.diagonal >= 0)
            assert acc.m > 0

    @settings(max_examples=30, deadline=None)
    @given(st.permutations(list(range(12))))
    def test_order_invariance_with_tiny_beta(self, perm):
        rng = np.random.default_rng(5)
        grads = rng.normal(size=(12, 4))
        a = FisherAccumulator.zeros(4, beta=1e-12)
        b = FisherAccumulator.zeros(4, beta=1e-12)
        for g in grads:
            a.update(g)
        for i in perm:
            b.update(grads[i])
        np.testing.assert_allclose(a.unbiased(), b.unbiased(), rtol=1e-9)


class TestVarianceReduced:
    def test_zero_td_zero_gamma(self):
        acc = FisherAccumulator(np.array([1.0, 2.0]), beta=0.5)
        acc.update_variance_reduced(np.array([3.0, 4.0]), td_error=0.0, gamma=0.0)
        np.testing.assert_allclose(acc.diagonal, [0.5, 1.0])
        assert acc.m == 1.5

    def test_factor_arithmetic(self):
        assert expected_residual_factor(1.0, 1.0, 1, scale=SCALE_HALF_RESIDUAL) == 0.5
        assert expected_residual_factor(1.0, 1.0, 1, scale=SCALE_LOGLIK) == 2.0
        assert expected_residual_factor(1.0, 1.0, 1, scale=SCALE_SQUARED_LOSS) == 8.0
        assert expected_residual_factor(0.0, 0.5, 2, sigma_return=2.0, scale=4.0) == pytest.approx(0.5**4 * 4)

    def test_k_must_be_positive(self):
        with pytest.raises(ConfigError):
            expected_residual_factor(1.0, 0.9, 0)

    def test_matches_monte_carlo_of_squared_loss_gradient(self):
        rng = np.random.default_rng(2)
        net = mlp_init([3, 4, 2], seed=9)
        x, a, G, gamma = np.array([0.4, -1.2, 0.8]), 1, 0.35, 0.9
        q = net.forward(x)[a]
        eta = rng.standard_normal(20_000)
        mc = np.mean([net.grad_squared_error(x, a, G + gamma * e) ** 2 for e in eta], axis=0)
        acc = FisherAccumulator.zeros(net.n_params, beta=0.0)
        acc.update_variance_reduced(net.grad_q(x, a), G - q, gamma, k=1)
        closed = acc.diagonal
        nz = closed > 1e-14
        # 2e4 draws: relative MC error ~1%, so 4% is a 4-sigma band
        assert np.max(np.abs(mc[nz] / closed[nz] - 1)) < 0.04
        assert np.all(mc[~nz] < 1e-12)


class TestSampling:
    def test_identity_case(self):
        acc = FisherAccumulator.zeros(4, eps=1.0, omega=1.0)
        mean = np.array([1.0, 2.0, 3.0, 4.0])
        z = np.random.default_rng(3).standard_normal(4)
        draw = sample_posterior(acc, mean, np.random.default_rng(3))
        np.testing.assert_allclose(draw, mean + z, rtol=1e-15)

    def test_moments(self):
        rng = np.random.default_rng(0)
        acc = FisherAccumulator(np.array([0.0, 3.0, 99.0]), eps=1.0, omega=2.0, n=5.0)
        mean = np.array([0.5, -1.0, 2.0])
        draws = sample_posterior_batch(acc, mean, 100_000, rng)
        sig = 1 / np.sqrt(acc.unbiased() + acc.eps)
        target_var = sig**2 / (acc.n * acc.omega)
        assert np.all(np.abs(draws.mean(0) - mean) < 4 * sig.max() / np.sqrt(1e5))
        np.testing.assert_allclose(draws.var(0, ddof=1), target_var, rtol=0.05)

    def test_deterministic(self):
        acc = FisherAccumulator(np.ones(5))
        a = sample_posterior(acc, np.zeros(5), np.random.default_rng(1))
        b = sample_posterior(acc, np.zeros(5), np.random.default_rng(1))
        assert np.array_equal(a, b)

    def test_subset_sampler_scale(self):
        acc = FisherAccumulator(np.array([1.0, 4.0, 9.0, 16.0]), eps=1e-12, omega=3.0, n=2.0)
        idx = np.array([1, 3])
        draws = np.stack([sample_posterior_subset(acc, np.zeros(4), idx, np.random.default_rng(s))
                          for s in range(20_000)])
        assert np.all(draws[:, [0, 2]] == 0)
        np.testing.assert_allclose(draws[:, idx].std(0), acc.posterior_std()[idx], rtol=0.03)

    def test_width_shrinks_as_inverse_sqrt_n(self):
        net = mlp_init([3, 5, 2], seed=0)
        # large n keeps draws inside the locally linear region of the network
        acc = FisherAccumulator(np.full(net.n_params, 2.0), eps=1e-3, omega=1.0, n=1e6)
        x = np.array([1.0, -0.5, 0.3])
        s1 = epistemic_q_std(acc, net.params, net, x, 0, 4000, np.random.default_rng(1))
        acc.n *= 4
        s4 = epistemic_q_std(acc, net.params, net, x, 0, 4000, np.random.default_rng(1))
        assert s1 / s4 == pytest.approx(2.0, rel=1e-3)
        np.testing.assert_allclose(acc.posterior_std() * 2, np.sqrt(1 / (2.0 + 1e-3) / 1e6))

    def test_sampling_never_nan(self):
        acc = FisherAccumulator.zeros(1000, eps=1e-300, omega=1e-10)
        draw = sample_posterior(acc, np.zeros(1000), np.random.default_rng(0))
        assert np.all(np.isfinite(draw))


class TestEpistemicStd:
    def test_collapsed_posterior(self):
        net = mlp_init([3, 4, 2], seed=0)
        acc = FisherAccumulator(np.full(net.n_params, 1e16), omega=1.0)
        s = epistemic_q_std(acc, net.params, net, np.ones(3), 1, 50, np.random.default_rng(0))
        assert s < 1e-6

    def test_linear_gaussian_closed_form(self):
        # a single linear layer is q(s, a) = w_a . phi(s) + b_a
        n_in, n_act = 4, 2
        rng = np.random.default_rng(4)
        net = MlpNetwork((n_in, n_act), rng.normal(size=n_in * n_act + n_act))
        acc = FisherAccumulator(rng.uniform(0.5, 3.0, size=net.n_params), eps=0.1, omega=2.0, n=3.0)
        phi = rng.normal(size=n_in)
        a = 1
        var = acc.posterior_std() ** 2
        # coordinates feeding action a: row a of W, then bias a
        w_idx = np.arange(a * n_in, (a + 1) * n_in)
        b_idx = n_in * n_act + a
        closed = np.sqrt(np.sum(var[w_idx] * phi**2) + var[b_idx])
        est = epistemic_q_std(acc, net.params, net, phi, a, 10_000, np.random.default_rng(5))
        assert est == pytest.approx(closed, rel=0.05)

    def test_seeded_determinism(self):
        net = mlp_init([3, 4, 2], seed=0)
        acc = FisherAccumulator(np.ones(net.n_params))
        args = (acc, net.params, net, np.ones(3), 0, 20)
        assert epistemic_q_std(*args, np.random.default_rng(9)) == epistemic_q_std(*args, np.random.default_rng(9))

    def test_needs_two_samples(self):
        net = mlp_init([3, 4, 2], seed=0)
        with pytest.raises(ConfigError):
            epistemic_q_std(FisherAccumulator.zeros(net.n_params), net.params, net, np.ones(3), 0, 1,
                            np.random.default_rng(0))


class TestKronecker:
    def test_vec_identity(self):
        rng = np.random.default_rng(0)
        A, G = random_spd(3, rng), random_spd(2, rng)
        block = KroneckerBlock(A, G)
        x = rng.normal(size=6)
        np.testing.assert_allclose(block.matvec(x), np.kron(A, G) @ x, rtol=1e-12)
        M = rng.normal(size=(2, 3))
        assert np.array_equal(unvec(vec(M), 2, 3), M)

    def test_factor_inverse_matches_dense(self):
        rng = np.random.default_rng(1)
        block = KroneckerBlock(random_spd(3, rng), random_spd(2, rng))
        dense = np.linalg.inv(np.kron(block.A, block.G))
        assert np.max(np.abs(block.inverse() - dense)) < 1e-10

    def test_identity_factors(self):
        block = KroneckerBlock(np.eye(3), np.eye(2))
        mu = np.arange(6.0)
        z = np.random.default_rng(7).standard_normal((2, 3))
        draw = block.sample(mu, np.random.default_rng(7))
        # eigenvector signs may flip, so compare through the covariance only
        assert np.allclose(np.sort(np.abs(draw - mu)), np.sort(np.abs(z.ravel(order="F"))))

    def test_empirical_covariance(self):
        rng = np.random.default_rng(2)
        block = KroneckerBlock(random_spd(3, rng), random_spd(2, rng))
        mu = rng.normal(size=6)
        draws = block.sample(mu, np.random.default_rng(3), size=100_000)
        cov = np.cov(draws, rowvar=False)
        dense = np.linalg.inv(np.kron(block.A, block.G))
        assert np.linalg.norm(cov - dense) / np.linalg.norm(dense) < 0.05
        assert np.max(np.abs(draws.mean(0) - mu)) < 0.01

    def test_single_and_batched_draws_agree(self):
        rng = np.random.default_rng(4)
        block = KroneckerBlock(random_spd(3, rng), random_spd(4, rng))
        mu = np.zeros(12)
        one = block.sample(mu, np.random.default_rng(8))
        many = block.sample(mu, np.random.default_rng(8), size=1)
        np.testing.assert_allclose(one, many[0], rtol=1e-12, atol=1e-15)

    def test_one_dimensional_factor_matches_direct_sampling(self):
        rng = np.random.default_rng(5)
        G = random_spd(3, rng)
        block = KroneckerBlock(np.array([[2.0]]), G)
        cov = np.linalg.inv(2.0 * G)
        kfac = block.sample(np.zeros(3), np.random.default_rng(6), size=10_000)
        direct = np.random.default_rng(7).multivariate_normal(np.zeros(3), cov, size=10_000)
        for j in range(3):
            res = stats.ks_2samp(kfac[:, j], direct[:, j])
            # critical value of the two-sample KS test at alpha = 0.01
            assert res.statistic < 1.628 * np.sqrt(2 / 10_000)

    def test_non_spd_rejected(self):
        with pytest.raises(np.linalg.LinAlgError):
            KroneckerBlock(np.array([[1.0, 2.0], [2.0, 1.0]]), np.eye(2))
        with pytest.raises(np.linalg.LinAlgError):
            KroneckerBlock(np.eye(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
