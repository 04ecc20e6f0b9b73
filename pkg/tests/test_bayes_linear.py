import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import norm

from ctbrl.bayes_linear import MNIWPosterior, augment, sample_inverse_wishart
from ctbrl.errors import NumericalError


def fit_sequentially(prior, xs, ys):
    post = prior
    for x, y in zip(xs, ys):
        post = post.update(x, y)
    return post


class TestPosteriorUpdate:
    def test_prior_predictive_mean_is_zero(self):
        prior = MNIWPosterior.default_prior(d_out=2, d_in=3)
        for x in [np.array([1.0, -2.0, 1.0]), np.array([0.3, 5.0, 1.0])]:
            assert np.allclose(prior.predictive_mean(x), 0.0)

    def test_noiseless_line_matches_ridge_oracle(self):
        # y = 2x + 1 on 50 points; the prior N = I acts as a unit ridge.
        rng = np.random.default_rng(7)
        xs_raw = rng.uniform(-10.0, 10.0, size=50)
        xs = [augment([x]) for x in xs_raw]
        ys = [np.array([2.0 * x + 1.0]) for x in xs_raw]
        post = fit_sequentially(MNIWPosterior.default_prior(1, 2), xs, ys)

        X = np.stack(xs)
        Y = np.stack(ys)
        ridge = np.linalg.solve(np.eye(2) + X.T @ X, X.T @ Y).T
        assert np.max(np.abs(post.mean_matrix - ridge)) < 1e-6
        # The unit ridge shrinks the intercept by roughly 1/(t+1).
        assert np.max(np.abs(post.mean_matrix - np.array([[2.0, 1.0]]))) < 0.05

    def test_sequential_equals_batch_sufficient_statistics(self):
        rng = np.random.default_rng(11)
        prior = MNIWPosterior.default_prior(d_out=2, d_in=3)
        xs = [augment(rng.normal(size=2)) for _ in range(40)]
        ys = [rng.normal(size=2) for _ in range(40)]
        post = fit_sequentially(prior, xs, ys)

        X = np.stack(xs)
        Y = np.stack(ys)
        sxx = X.T @ X
        syx = Y.T @ X
        syy = Y.T @ Y
        prec = prior.input_precision + sxx
        mean = np.linalg.solve(prec.T, (prior.mean_matrix @ prior.input_precision + syx).T).T
        scale = (
            prior.wishart_scale
            + syy
            + prior.mean_matrix @ prior.input_precision @ prior.mean_matrix.T
            - mean @ prec @ mean.T
        )
        assert np.max(np.abs(post.input_precision - prec)) < 1e-10
        assert np.max(np.abs(post.mean_matrix - mean)) < 1e-10
        assert np.max(np.abs(post.wishart_scale - scale)) < 1e-10
        assert post.dof == prior.dof + 40
        assert post.obs_count == 40

    def test_dimension_mismatch_raises(self):
        prior = MNIWPosterior.default_prior(d_out=2, d_in=3)
        with pytest.raises(ValueError):
            prior.update(np.ones(2), np.ones(2))
        with pytest.raises(ValueError):
            prior.update(np.ones(3), np.ones(3))

    def test_spd_is_preserved_and_counts_increase(self):
        rng = np.random.default_rng(3)
        post = MNIWPosterior.default_prior(d_out=2, d_in=3)
        for t in range(200):
            post = post.update(augment(rng.normal(size=2)), rng.normal(size=2))
            assert post.obs_count == t + 1
            np.linalg.cholesky(post.input_precision)
            np.linalg.cholesky(post.wishart_scale)


class TestPredictiveDensity:
    def test_z_sherman_morrison_identity(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            d = rng.integers(1, 5)
            root = rng.normal(size=(d, d))
            prec = root @ root.T + d * np.eye(d)
            post = MNIWPosterior(np.zeros((1, d)), prec, np.eye(1), 2.0)
            x = rng.normal(size=d)
            direct = post.predictive_z(x)
            via_inverse = 1.0 / (1.0 + x @ np.linalg.solve(prec, x))
            assert abs(direct - via_inverse) < 1e-10
            assert 0.0 < direct <= 1.0

    def test_quadrature_normalisation_1d(self):
        rng = np.random.default_rng(19)
        post = MNIWPosterior.default_prior(d_out=1, d_in=2)
        for _ in range(5):
            post = post.update(augment(rng.normal(size=1)), rng.normal(size=1))
        x = augment([0.7])
        for mode in ("paper", "exact"):
            total, _ = quad(lambda y: post.predictive_density(x, [y], dof_mode=mode), -50.0, 50.0, limit=200)
            assert abs(total - 1.0) < 1e-4

    def test_symmetric_about_location_when_mean_zero(self):
        prior = MNIWPosterior.default_prior(d_out=2, d_in=3)
        x = augment([0.4, -1.2])
        y = np.array([0.3, 0.9])
        assert abs(prior.predictive_density(x, y) - prior.predictive_density(x, -y)) < 1e-12

    def test_monte_carlo_predictive_consistency_1d(self):
        # Under the "exact" dof convention the Student-t must equal the
        # integral of N(y | a x, v) against the sampling distribution of (a, v).
        rng = np.random.default_rng(23)
        post = MNIWPosterior.default_prior(d_out=1, d_in=2)
        for _ in range(8):
            post = post.update(augment(rng.normal(size=1)), rng.normal(size=1))

        x = augment([0.5])
        n_draws = 100_000
        # Independent parameter draws straight from the distribution's definition:
        # 1-d inverse-Wishart(w, n) is w / chi2(n); a | v is normal around Mx.
        w = post.wishart_scale[0, 0]
        v = w / rng.chisquare(post.dof, size=n_draws)
        loc = post.predictive_mean(x)[0]
        x_norm_sq = float(x @ np.linalg.solve(post.input_precision, x))
        mean_draws = loc + np.sqrt(v * x_norm_sq) * rng.standard_normal(n_draws)
        for y in (loc - 1.0, loc + 0.3, loc + 2.5):
            vals = norm.pdf(y, loc=mean_draws, scale=np.sqrt(v))
            mc, se = vals.mean(), vals.std(ddof=1) / np.sqrt(n_draws)
            exact = post.predictive_density(x, [y], dof_mode="exact")
            assert abs(exact - mc) < 3 * se

    def test_dof_increases_with_data(self):
        rng = np.random.default_rng(2)
        post = MNIWPosterior.default_prior(d_out=1, d_in=2)
        dofs = [post.predictive_dof("paper")]
        for _ in range(10):
            post = post.update(augment(rng.normal(size=1)), rng.normal(size=1))
            dofs.append(post.predictive_dof("paper"))
        assert all(b > a for a, b in zip(dofs, dofs[1:]))

    def test_posterior_contraction_median_over_runs(self):
        # Data from a fixed linear model: the dof-normalised predictive scale
        # should shrink between t=10 and t=1000 for most runs.
        design = np.array([[1.5, -0.5]])
        x_probe = augment([0.3])
        ratios_early, ratios_late = [], []
        for seed in range(20):
            rng = np.random.default_rng(100 + seed)
            post = MNIWPosterior.default_prior(1, 2)
            snapshot = {}
            for t in range(1, 1001):
                x = augment(rng.uniform(-1, 1, size=1))
                y = design @ x + 0.1 * rng.standard_normal(1)
                post = post.update(x, y)
                if t in (10, 1000):
                    scale = post.wishart_scale / post.predictive_z(x_probe)
                    snapshot[t] = np.trace(scale) / post.dof
            ratios_early.append(snapshot[10])
            ratios_late.append(snapshot[1000])
        assert np.median(ratios_late) < np.median(ratios_early)


class TestSampleParameters:
    def test_inverse_wishart_mean(self):
        rng = np.random.default_rng(31)
        draws = np.zeros((2, 2))
        n_draws = 50_000
        for _ in range(n_draws):
            draws += sample_inverse_wishart(rng, np.eye(2), 6.0)
        mean = draws / n_draws
        expected = np.eye(2) / 3.0
        assert np.max(np.abs(mean - expected)) / np.max(expected) < 0.05

    def test_design_mean_matches_location(self):
        rng = np.random.default_rng(37)
        post = MNIWPosterior(
            mean_matrix=np.array([[0.5, -1.0], [2.0, 0.1]]),
            input_precision=4.0 * np.eye(2),
            wishart_scale=np.eye(2),
            dof=8.0,
        )
        n_draws = 50_000
        samples = np.empty((n_draws, 2, 2))
        for i in range(n_draws):
            samples[i] = post.sample(rng).design
        se = samples.std(axis=0, ddof=1) / np.sqrt(n_draws)
        assert np.all(np.abs(samples.mean(axis=0) - post.mean_matrix) < 3 * se)

    def test_fixed_seed_is_deterministic(self):
        post = MNIWPosterior.default_prior(d_out=2, d_in=3)
        a = post.sample(np.random.default_rng(99))
        b = post.sample(np.random.default_rng(99))
        assert np.array_equal(a.design, b.design)
        assert np.array_equal(a.covariance, b.covariance)

    def test_sampled_covariance_is_spd(self):
        rng = np.random.default_rng(41)
        post = MNIWPosterior.default_prior(d_out=3, d_in=4)
        for _ in range(50):
            cov = post.sample(rng).covariance
            assert np.allclose(cov, cov.T)
            np.linalg.cholesky(cov)

    def test_dof_too_small_raises(self):
        with pytest.raises(ValueError):
            sample_inverse_wishart(np.random.default_rng(0), np.eye(3), 1.5)


def test_student_shape_failure_raises_numerical_error():
    post = MNIWPosterior(np.zeros((2, 2)), np.eye(2), -np.eye(2), 5.0)
    with pytest.raises(NumericalError):
        post.predictive_density(np.ones(2), np.ones(2))
