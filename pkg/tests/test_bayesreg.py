import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from dropout_risk.bayesreg import (
    MonomialSpec,
    RegressionPosterior,
    SamplerError,
    design_matrix,
    design_row,
    fit_bayes,
    log_likelihood,
    log_posterior,
    log_prior,
    mcmc_sample,
    mcse,
    posterior_predict,
    posterior_summary,
    r_hat,
    read_posterior_csv,
    write_posterior_csv,
    write_summary_json,
)
from dropout_risk.datamodel import Standardizer


def conjugate_fixture(n=200, seed=0, sigma=0.1, tau=1e3):
    rng = np.random.default_rng(seed)
    X = design_matrix(rng.normal(size=(n, 3)))
    w_true = rng.normal(scale=0.3, size=10)
    y = X @ w_true + sigma * rng.normal(size=n)
    prec = X.T @ X / sigma ** 2 + np.eye(10) / tau ** 2
    cov = np.linalg.inv(prec)
    return X, y, cov @ (X.T @ y) / sigma ** 2, cov


def test_design_row_examples():
    assert design_row([0.0, 0.0, 0.0]).tolist() == [1] + [0] * 9
    assert design_row([1.0, 2.0, 3.0]).tolist() == [1, 1, 2, 3, 1, 2, 3, 4, 6, 9]


def test_monomial_order_matches_enumeration():
    spec = MonomialSpec.quadratic(3)
    # graded, lexicographic in (a, b, c) from the highest power of t1 down
    expected = [e for d in (1, 2) for e in sorted(itertools.product(range(3), repeat=3), reverse=True)
                if sum(e) == d]
    assert list(spec.exponents) == expected
    assert spec.n_columns == 10
    assert spec.labels(["T", "W", "P"]) == ["1", "T", "W", "P", "T^2", "T*W", "T*P", "W^2", "W*P", "P^2"]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_design_row_matches_monomials(theta):
    spec = MonomialSpec.quadratic(3)
    row = design_row(theta)
    ref = [1.0] + [math.prod(t ** k for t, k in zip(theta, e)) for e in spec.exponents]
    np.testing.assert_allclose(row, ref, rtol=1e-15, atol=0)


def test_design_matrix_dimension_check():
    with pytest.raises(ValueError):
        design_matrix(np.zeros((2, 3)), MonomialSpec.quadratic(2))


def test_log_posterior_rejects_nonpositive_sigma():
    X, y, *_ = conjugate_fixture(30)
    assert log_posterior(np.zeros(10), 0.0, X, y) == -math.inf
    assert log_posterior(np.zeros(10), -1.0, X, y) == -math.inf


def test_log_posterior_density_oracle():
    X, y, *_ = conjugate_fixture(30)
    w = np.random.default_rng(1).normal(size=10)
    sigma = 0.37
    ref = (stats.norm.logpdf(y, X @ w, sigma).sum() + stats.norm.logpdf(w, 0, 10.0).sum()
           + stats.halfnorm.logpdf(sigma, scale=1.0))
    assert log_posterior(w, sigma, X, y) == pytest.approx(ref, rel=1e-12)
    # doubling sigma at fixed residuals
    r = y - X @ w
    diff = log_likelihood(w, 2 * sigma, X, y) - log_likelihood(w, sigma, X, y)
    assert diff == pytest.approx(-len(y) * math.log(2) - r @ r / 2 * (1 / (4 * sigma ** 2) - 1 / sigma ** 2), rel=1e-12)


def test_log_posterior_trivial_terms():
    X = design_matrix(np.zeros((5, 3)))
    sigma = 0.5
    assert log_likelihood(np.zeros(10), sigma, X, np.zeros(5)) == pytest.approx(-5 * math.log(sigma * math.sqrt(2 * math.pi)))
    ref = stats.halfnorm.logpdf(sigma) + 10 * stats.norm.logpdf(0, scale=10.0)
    assert log_prior(np.zeros(10), sigma) == pytest.approx(ref, rel=1e-13)


def test_log_posterior_permutation_invariant():
    X, y, *_ = conjugate_fixture(50)
    w = np.random.default_rng(2).normal(size=10)
    perm = np.random.default_rng(3).permutation(50)
    assert abs(log_posterior(w, 0.2, X, y) - log_posterior(w, 0.2, X[perm], y[perm])) < 1e-12 * 1e4


def test_conjugate_fixed_sigma_means():
    X, y, mu, cov = conjugate_fixture()
    post = mcmc_sample(X, y, chains=6, draws=4000, warmup=2000, seed=0, tau=1e3, fixed_sigma=0.1)
    assert np.all(post.sigma_draws == 0.1)
    for k in range(10):
        d = post.weight_draws[..., k]
        assert abs(d.mean() - mu[k]) < 3 * mcse(d), k
    assert np.all((post.acceptance_rates > 0) & (post.acceptance_rates < 1))


def test_sampler_deterministic():
    X, y, *_ = conjugate_fixture(40)
    a = mcmc_sample(X, y, chains=2, draws=50, warmup=50, seed=4)
    b = mcmc_sample(X, y, chains=2, draws=50, warmup=50, seed=4)
    assert a.weight_draws.tobytes() == b.weight_draws.tobytes()
    assert a.sigma_draws.tobytes() == b.sigma_draws.tobytes()


def test_adaptation_frozen_after_warmup():
    X, y, *_ = conjugate_fixture(40)
    short = mcmc_sample(X, y, chains=2, draws=10, warmup=200, seed=5)
    long = mcmc_sample(X, y, chains=2, draws=500, warmup=200, seed=5)
    assert np.array_equal(short.proposal_scales, long.proposal_scales)
    assert np.array_equal(short.weight_draws, long.weight_draws[:, :10])


def test_sampler_needs_data():
    X, y, *_ = conjugate_fixture(19)
    with pytest.raises(ValueError):
        mcmc_sample(X, y)


def test_sampler_error_type():
    assert issubclass(SamplerError, RuntimeError)


def test_r_hat_examples():
    assert r_hat([[1, 2, 3, 4], [1, 2, 3, 4]]) == pytest.approx(math.sqrt(3 / 4), rel=1e-15)
    rng = np.random.default_rng(6)
    assert r_hat(rng.normal(size=(4, 10_000))) < 1.01
    sep = np.stack([rng.normal(0, 1e-3, 100), rng.normal(100, 1e-3, 100)])
    assert r_hat(sep) > 1.5


def test_r_hat_errors():
    with pytest.raises(ValueError):
        r_hat([[1, 2, 3, 4]])
    with pytest.raises(ValueError):
        r_hat([[1, 1, 1, 1], [1, 1, 1, 1]])


def test_mcse_iid_matches_standard_error():
    d = np.random.default_rng(7).normal(size=(4, 10_000))
    assert mcse(d) == pytest.approx(1 / math.sqrt(40_000), rel=0.15)


def make_posterior(W, S):
    W, S = np.asarray(W, float), np.asarray(S, float)
    return RegressionPosterior(W, S, np.ones(W.shape[0]), np.ones((W.shape[0], W.shape[-1] + 1)))


def test_predict_single_draw():
    w = np.arange(10, dtype=float) / 10
    post = make_posterior(w[None, None], [[0.1]])
    m, v = posterior_predict(post, [1.0, 2.0, 3.0])
    assert m == pytest.approx(design_row([1.0, 2.0, 3.0]) @ w, rel=1e-15)
    assert v == pytest.approx(0.01, rel=1e-14)


def test_predict_origin_uses_intercept_only():
    rng = np.random.default_rng(8)
    W = rng.normal(size=(2, 30, 10))
    post = make_posterior(W, np.full((2, 30), 0.2))
    m, v = posterior_predict(post, np.zeros(3))
    w0 = W[..., 0].reshape(-1)
    assert m == pytest.approx(w0.mean(), rel=1e-13)
    assert v == pytest.approx(w0.var() + 0.04, rel=1e-12)


def test_predict_matches_draw_loop():
    rng = np.random.default_rng(9)
    post = make_posterior(rng.normal(size=(3, 40, 10)), rng.uniform(0.05, 0.3, (3, 40)))
    theta = rng.normal(size=(7, 3))
    mean, var = posterior_predict(post, theta)
    for i, t in enumerate(theta):
        vals = [design_row(t) @ w for w in post.weight_draws.reshape(-1, 10)]
        ref_var = np.var(vals) + np.mean(post.sigma_draws ** 2)
        assert abs(mean[i] - np.mean(vals)) < 1e-12
        assert abs(var[i] - ref_var) < 1e-12


def test_posterior_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        make_posterior(np.zeros((1, 1, 10)), [[0.0]])


def test_posterior_csv_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    post = make_posterior(rng.normal(size=(2, 5, 10)), rng.uniform(0.1, 1, (2, 5)))
    write_posterior_csv(tmp_path / "p.csv", post)
    header = (tmp_path / "p.csv").read_text().splitlines()[0]
    assert header == "chain,draw,w0,w1,w2,w3,w4,w5,w6,w7,w8,w9,sigma"
    back = read_posterior_csv(tmp_path / "p.csv")
    assert np.array_equal(back.weight_draws, post.weight_draws)
    assert np.array_equal(back.sigma_draws, post.sigma_draws)


def test_summary_json(tmp_path):
    rng = np.random.default_rng(11)
    post = make_posterior(rng.normal(size=(2, 20, 10)), rng.uniform(0.1, 1, (2, 20)))
    s = posterior_summary(post)
    assert list(s["parameters"])[-1] == "sigma" and len(s["parameters"]) == 11
    write_summary_json(tmp_path / "s.json", post)
    assert (tmp_path / "s.json").read_text().endswith("}\n")


def test_fit_bayes_predicts_raw_inputs():
    rng = np.random.default_rng(12)
    x = rng.uniform(0, 10, size=(200, 3))
    y = 0.1 + 0.01 * x[:, 0] + 0.002 * x[:, 1] * x[:, 2] + 0.005 * rng.normal(size=200)
    std = Standardizer(x.mean(0), x.std(0, ddof=1))
    model = fit_bayes(x, y, std, chains=2, draws=500, warmup=500, seed=0)
    m, v = model.predict(x[:5])
    assert model.input_dim == 3
    assert np.all(np.abs(m - y[:5]) < 0.03)
    assert np.all(v > 0)
