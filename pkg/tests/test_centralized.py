import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_beta_gradient, make_instance, rel_err

from vfem import (
    BlockLayout,
    FitConfig,
    ModelParameters,
    closed_form_m_step,
    conditional_moments,
    initialize,
    observed_loglik,
    observed_loss,
    q_gradient_beta,
    q_value,
)
from vfem.baselines import ols
from vfem.centralized import estep
from vfem.errors import DegenerateVariance, SingularCovariance


def scalar_theta(beta=1.0, mu=0.0, var=1.0, sigma2=1.0):
    return ModelParameters(beta=np.array([beta]), mu=(np.array([mu]),),
                           sigma_blocks=(np.array([[var]]),), sigma2=sigma2)


class TestConditionalMoments:
    def test_fully_observed_sample_has_empty_moments(self):
        theta = scalar_theta()
        mom = conditional_moments(theta, BlockLayout((1,)), [], {1: np.array([0.3])},
                                  y_i=1.0)
        assert mom.is_empty()
        assert mom.mean.shape == (0,)

    def test_zero_coefficients_leave_marginals(self):
        # with beta zero on the missing block, y carries no information
        layout = BlockLayout((2, 2))
        theta = ModelParameters(beta=np.array([0.5, -0.5, 0.0, 0.0]),
                                mu=(np.zeros(2), np.array([1.0, 2.0])),
                                sigma_blocks=(np.eye(2), np.diag([2.0, 3.0])),
                                sigma2=1.0)
        mom = conditional_moments(theta, layout, [2], {1: np.array([1.0, 1.0])},
                                  y_i=5.0)
        assert np.allclose(mom.mean, [1.0, 2.0])
        assert np.allclose(mom.dense_cov(), np.diag([2.0, 3.0]))

    def test_scalar_all_missing_case(self):
        # mu=0, var=1, beta=1, sigma2=1, y=2: mean 1.0, conditional var 0.5
        mom = conditional_moments(scalar_theta(), BlockLayout((1,)), [1], {},
                                  y_i=2.0)
        assert mom.mean == pytest.approx(1.0, abs=1e-15)
        assert mom.dense_cov()[0, 0] == pytest.approx(0.5, abs=1e-15)
        assert mom.alpha()[0] == pytest.approx(0.5, abs=1e-15)

    def test_nothing_observed_at_marginal_mean_response(self):
        # y at its marginal mean: the shrinkage term vanishes, mean = mu
        layout = BlockLayout((1, 2))
        theta = ModelParameters(beta=np.array([1.0, 2.0, -1.0]),
                                mu=(np.array([0.5]), np.array([1.0, -1.0])),
                                sigma_blocks=(np.eye(1), np.eye(2)),
                                sigma2=0.7)
        mu_y = 0.5 * 1.0 + (1.0 * 2.0 + -1.0 * -1.0)
        mom = conditional_moments(theta, layout, [1, 2], {}, y_i=mu_y)
        assert np.allclose(mom.mean, [0.5, 1.0, -1.0], atol=1e-14)

    def test_degenerate_denominator_raises(self):
        with pytest.raises(DegenerateVariance):
            conditional_moments(scalar_theta(beta=0.0, sigma2=1e-14),
                                BlockLayout((1,)), [1], {}, y_i=0.0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_conditional_covariance_dominated_by_marginal(self, seed):
        # marginal minus conditional covariance is PSD (rank-one subtraction)
        rng = np.random.default_rng(seed)
        dims = tuple(rng.integers(1, 3, size=rng.integers(1, 4)))
        layout = BlockLayout(dims)
        p = layout.total_dim
        a_blocks = []
        for d in dims:
            a = rng.standard_normal((d, d))
            a_blocks.append(a @ a.T + 0.5 * np.eye(d))
        theta = ModelParameters(beta=rng.standard_normal(p),
                                mu=tuple(rng.standard_normal(d) for d in dims),
                                sigma_blocks=tuple(a_blocks),
                                sigma2=float(rng.uniform(0.1, 2.0)))
        missing = [k for k in layout.clients() if rng.random() < 0.6]
        observed = {k: rng.standard_normal(layout.dim(k))
                    for k in layout.clients() if k not in missing}
        mom = conditional_moments(theta, layout, missing, observed,
                                  y_i=float(rng.standard_normal()))
        if mom.q:
            gap = mom.dense_marginal_cov() - mom.dense_cov()
            assert np.linalg.eigvalsh(gap).min() >= -1e-10


class TestQFunction:
    def test_no_missing_matches_complete_loglik_up_to_constants(self):
        data, truth = make_instance(80, (2, 2), 0.0, seed=3)
        theta = truth.params
        x = data.full_design()
        n, p = x.shape
        resid = data.y - x @ theta.beta
        ll = -0.5 * n * np.log(2 * np.pi * theta.sigma2) \
            - 0.5 * np.sum(resid ** 2) / theta.sigma2
        for k in data.layout.clients():
            blk = x[:, data.layout.block_slice(k)] - theta.mu[k - 1]
            sig = theta.sigma_blocks[k - 1]
            sign, logdet = np.linalg.slogdet(sig)
            sol = np.linalg.solve(sig, blk.T)
            ll += -0.5 * n * (data.layout.dim(k) * np.log(2 * np.pi) + logdet) \
                - 0.5 * np.sum(blk.T * sol)
        offset = 0.5 * np.log(2 * np.pi) * (1 + p)  # constants dropped
        assert q_value(theta, theta, data) == pytest.approx(ll / n + offset,
                                                            abs=1e-9)

    def test_m_step_does_not_decrease_q(self, small_instance):
        data, truth = small_instance
        theta_t = initialize(data, FitConfig())
        new = closed_form_m_step(theta_t, data)
        assert q_value(new, theta_t, data) >= q_value(theta_t, theta_t, data) - 1e-12

    def test_gradient_matches_finite_differences(self):
        data, truth = make_instance(50, (2, 2, 2), 0.3, seed=21)
        theta_t = initialize(data, FitConfig()).replace(
            beta=np.linspace(-1.0, 1.0, 6))
        g = q_gradient_beta(theta_t, data)
        fd = fd_beta_gradient(theta_t, data)
        assert rel_err(g, fd) < 1e-6

    def test_singular_covariance_rejected(self, small_instance):
        data, _ = small_instance
        theta_t = initialize(data, FitConfig())
        bad = theta_t.replace(sigma_blocks=(
            np.zeros((2, 2)),) + theta_t.sigma_blocks[1:])
        with pytest.raises(SingularCovariance):
            q_value(bad, theta_t, data)


class TestGradient:
    def test_zero_at_least_squares_solution(self):
        data, truth = make_instance(100, (2, 3), 0.0, seed=5)
        x = data.full_design()
        beta_ls = np.linalg.solve(x.T @ x, x.T @ data.y)
        theta = initialize(data, FitConfig()).replace(beta=beta_ls)
        assert np.abs(q_gradient_beta(theta, data)).max() < 1e-10

    def test_no_missing_reduces_to_residual_projection(self):
        # with unit noise variance: g = X'(y - X beta) / n
        data, _ = make_instance(70, (2, 2), 0.0, seed=6)
        x = data.full_design()
        beta = np.array([0.3, -0.2, 0.5, 0.1])
        theta = initialize(data, FitConfig()).replace(beta=beta, sigma2=1.0)
        expected = x.T @ (data.y - x @ beta) / data.n
        assert rel_err(q_gradient_beta(theta, data), expected) < 1e-12

    def test_matches_finite_differences_random_instance(self):
        data, _ = make_instance(50, (2, 2, 2), 0.3, seed=33)
        theta_t = initialize(data, FitConfig()).replace(
            beta=np.array([0.7, -0.4, 0.1, 0.9, -0.8, 0.2]))
        assert rel_err(q_gradient_beta(theta_t, data),
                       fd_beta_gradient(theta_t, data)) < 1e-6


class TestMStep:
    def test_no_missing_fixed_point_reproduces_least_squares(self):
        data, _ = make_instance(90, (2, 2), 0.0, seed=8)
        x = data.full_design()
        f = ols(x, data.y)
        theta_t = initialize(data, FitConfig()).replace(beta=f.beta)
        new = closed_form_m_step(theta_t, data)
        assert rel_err(new.beta, f.beta) < 1e-10
        assert new.sigma2 == pytest.approx(f.sigma2_mle, rel=1e-10)

    def test_sigma2_update_uses_iteration_start_coefficients(self):
        data, _ = make_instance(90, (2, 2), 0.0, seed=8)
        x = data.full_design()
        beta_t = np.array([0.1, 0.2, -0.3, 0.4])
        theta_t = initialize(data, FitConfig()).replace(beta=beta_t)
        new = closed_form_m_step(theta_t, data)
        assert new.sigma2 == pytest.approx(
            float(np.mean((data.y - x @ beta_t) ** 2)), rel=1e-12)

    def test_update_zeroes_gradient_in_beta(self):
        for seed in range(4):
            data, _ = make_instance(60, (2, 1, 2), 0.35, seed=40 + seed)
            theta_t = initialize(data, FitConfig())
            cache = estep(theta_t, data)
            new = closed_form_m_step(theta_t, data, cache)
            raw = cache.x_tilde.T @ (data.y - cache.x_tilde @ new.beta) \
                - cache.corrections @ new.beta
            assert np.abs(raw / (data.n * theta_t.sigma2)).max() < 1e-8

    def test_oracle_and_first_order_share_stationary_points(self):
        from vfem import fit
        data, _ = make_instance(500, (4, 3, 3), 0.3, seed=77)
        r1 = fit(data, FitConfig(engine="oracle", tol=1e-12))
        r2 = fit(data, FitConfig(engine="federated", tol=1e-12, max_iters=4000,
                                 byte_accounting=False))
        assert np.linalg.norm(r1.theta.beta - r2.theta.beta) < 1e-4


class TestObservedLoss:
    def test_zero_when_exact_fit_no_missing(self):
        assert observed_loss(np.zeros(5), np.zeros(5)) == 0.0

    def test_simple_arithmetic(self):
        assert observed_loss(np.array([1.0, 1.0]), np.zeros(2)) == 1.0

    def test_equals_noise_variance_update(self, small_instance):
        data, _ = small_instance
        theta_t = initialize(data, FitConfig())
        cache = estep(theta_t, data)
        new = closed_form_m_step(theta_t, data, cache)
        assert observed_loss(cache.e, cache.v4) == pytest.approx(new.sigma2,
                                                                 rel=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            observed_loss(np.zeros(3), np.zeros(4))


class TestObservedLoglik:
    def test_em_iterations_never_decrease_it(self):
        data, _ = make_instance(120, (2, 2, 2), 0.4, seed=13)
        theta = initialize(data, FitConfig())
        values = []
        for _ in range(15):
            values.append(observed_loglik(theta, data))
            theta = closed_form_m_step(theta, data)
        diffs = np.diff(values)
        assert np.all(diffs >= -1e-9)
