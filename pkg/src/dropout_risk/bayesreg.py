"""Quadratic Bayesian regression baseline fit by adaptive random-walk Metropolis.

Model: ``p_D ~ N(w . phi(theta), sigma^2)`` where ``phi`` holds the
intercept and every monomial of total degree 1 or 2, with priors
``w_i ~ N(0, tau^2)`` and ``sigma ~ HalfNormal(s0)``.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datamodel import Standardizer

TAU = 10.0
SIGMA_SCALE = 1.0
TARGET_ACCEPT = (0.2, 0.4)
_LOG_2PI = math.log(2 * math.pi)


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class MonomialSpec:
    exponents: tuple[tuple[int, ...], ...]

    @classmethod
    def quadratic(cls, n_params: int = 3) -> "MonomialSpec":
        """All monomials with total degree 1..2, graded, exponents descending within a degree."""
        exps = []
        for degree in (1, 2):
            exps += sorted((e for e in itertools.product(range(degree + 1), repeat=n_params)
                            if sum(e) == degree), reverse=True)
        return cls(tuple(exps))

    @property
    def n_params(self) -> int:
        return len(self.exponents[0])

    @property
    def n_columns(self) -> int:
        return 1 + len(self.exponents)

    def labels(self, names: Sequence[str] | None = None) -> list[str]:
        names = list(names) if names else [f"t{i + 1}" for i in range(self.n_params)]
        out = ["1"]
        for e in self.exponents:
            out.append("*".join(n if k == 1 else f"{n}^{k}" for n, k in zip(names, e) if k))
        return out


QUADRATIC_3 = MonomialSpec.quadratic(3)


def design_matrix(theta, spec: MonomialSpec | None = None) -> np.ndarray:
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    spec = spec or MonomialSpec.quadratic(theta.shape[1])
    if theta.shape[1] != spec.n_params:
        raise ValueError(f"expected {spec.n_params} parameters, got {theta.shape[1]}")
    cols = [np.ones(theta.shape[0])]
    for e in spec.exponents:
        c = np.ones(theta.shape[0])
        for i, k in enumerate(e):
            for _ in range(k):
                c = c * theta[:, i]
        cols.append(c)
    return np.column_stack(cols)


def design_row(theta, spec: MonomialSpec | None = None) -> np.ndarray:
    """``[1, t1, t2, t3, t1^2, t1 t2, t1 t3, t2^2, t2 t3, t3^2]`` for three parameters."""
    return design_matrix(np.asarray(theta, float)[None, :], spec)[0]


def log_likelihood(w, sigma: float, X: np.ndarray, y: np.ndarray) -> float:
    if sigma <= 0:
        return -math.inf
    r = np.asarray(y, float) - X @ np.asarray(w, float)
    n = len(r)
    return -n * math.log(sigma) - 0.5 * n * _LOG_2PI - float(r @ r) / (2 * sigma * sigma)


def log_prior(w, sigma: float, tau: float = TAU, s0: float = SIGMA_SCALE) -> float:
    if sigma <= 0:
        return -math.inf
    w = np.asarray(w, float)
    lw = -0.5 * len(w) * (_LOG_2PI + 2 * math.log(tau)) - float(w @ w) / (2 * tau * tau)
    ls = math.log(2.0) - 0.5 * (_LOG_2PI + 2 * math.log(s0)) - sigma * sigma / (2 * s0 * s0)
    return lw + ls


def log_posterior(w, sigma: float, X: np.ndarray, y: np.ndarray, tau: float = TAU,
                  s0: float = SIGMA_SCALE) -> float:
    """Unnormalized log posterior density; ``-inf`` for ``sigma <= 0``."""
    if sigma <= 0:
        return -math.inf
    return log_likelihood(w, sigma, X, y) + log_prior(w, sigma, tau, s0)


@dataclass(frozen=True, eq=False)
class RegressionPosterior:
    weight_draws: np.ndarray  # chains x draws x n_weights
    sigma_draws: np.ndarray  # chains x draws
    acceptance_rates: np.ndarray  # chains
    proposal_scales: np.ndarray  # chains x (n_weights + 1), frozen after warmup

    def __post_init__(self):
        if np.any(self.sigma_draws <= 0):
            raise ValueError("sigma draws must be positive")

    @property
    def n_chains(self) -> int:
        return self.weight_draws.shape[0]

    @property
    def n_draws(self) -> int:
        return self.weight_draws.shape[1]

    def parameter_draws(self) -> np.ndarray:
        """chains x draws x (n_weights + 1), sigma last."""
        return np.concatenate([self.weight_draws, self.sigma_draws[..., None]], axis=-1)

    def r_hats(self) -> np.ndarray:
        p = self.parameter_draws()
        return np.array([r_hat(p[..., k]) for k in range(p.shape[-1])])


def _lstsq_start(X, y):
    w, *_ = np.linalg.lstsq(X, y, rcond=None)
    n, p = X.shape
    resid = y - X @ w
    sigma = math.sqrt(max(float(resid @ resid) / max(n - p, 1), 1e-12))
    cov = sigma ** 2 * np.linalg.pinv(X.T @ X)
    return w, sigma, np.sqrt(np.clip(np.diag(cov), 1e-24, None))


def mcmc_sample(X: np.ndarray, y: np.ndarray, chains: int = 6, draws: int = 10_000,
                warmup: int = 5_000, seed=0, tau: float = TAU, s0: float = SIGMA_SCALE,
                fixed_sigma: float | None = None, adapt_every: int = 50,
                overdispersion: float = 5.0) -> RegressionPosterior:
    """Componentwise adaptive random-walk Metropolis over ``(w, log sigma)``.

    Parameters
    ----------
    X : ndarray, shape (n, p)
        Design matrix (see :func:`design_matrix`).
    y : ndarray, shape (n,)
    chains, draws, warmup : int
        ``draws`` retained sweeps per chain after ``warmup`` discarded ones.
        One sweep updates every weight and then ``log sigma`` once.
    seed : int
    tau, s0 : float
        Prior scales of the weights and of sigma.
    fixed_sigma : float, optional
        Hold sigma at this value instead of sampling it.
    adapt_every : int
        Warmup batch length between proposal-scale updates. Scales move
        toward an acceptance rate in ``TARGET_ACCEPT`` and are frozen once
        warmup ends.
    overdispersion : float
        Starting points are the least-squares fit plus this many standard
        errors of Gaussian noise.

    Returns
    -------
    RegressionPosterior
    """
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    n, p = X.shape
    if n < 20:
        raise ValueError(f"need at least 20 data points, got {n}")
    rng = np.random.default_rng(seed)
    C = chains
    G = X.T @ X
    Gdiag = np.diag(G).copy()
    Xty = X.T @ y
    yty = float(y @ y)

    w_ls, sigma_ls, se = _lstsq_start(X, y)
    W = w_ls + overdispersion * se * rng.standard_normal((C, p))
    if fixed_sigma is None:
        u = math.log(sigma_ls) + rng.standard_normal(C)
    else:
        u = np.full(C, math.log(fixed_sigma))
    log_scale = np.tile(np.log(np.append(2.4 * sigma_ls / np.sqrt(np.maximum(Gdiag, 1e-300)), 0.3)), (C, 1))
    log_floor, log_ceil = math.log(1e-10), math.log(1e3)

    def refresh(W):
        g = Xty[None, :] - W @ G  # X^T r per chain
        ssr = yty - 2 * W @ Xty + np.einsum("cp,pq,cq->c", W, G, W)
        return g, ssr

    g, ssr = refresh(W)
    total = warmup + draws
    out_w = np.empty((C, draws, p))
    out_s = np.empty((C, draws))
    acc_batch = np.zeros((C, p + 1))
    acc_kept = np.zeros(C)
    n_batches = 0
    inv_tau2 = 1.0 / (tau * tau)
    for it in range(total):
        sigma2 = np.exp(2 * u)
        z = rng.standard_normal((p + 1, C))
        logu = np.log(rng.random((p + 1, C)))
        for j in range(p):
            delta = np.exp(log_scale[:, j]) * z[j]
            d_ssr = -2 * delta * g[:, j] + delta * delta * Gdiag[j]
            d_prior = -((W[:, j] + delta) ** 2 - W[:, j] ** 2) * 0.5 * inv_tau2
            accept = logu[j] < -d_ssr / (2 * sigma2) + d_prior
            step = np.where(accept, delta, 0.0)
            W[:, j] += step
            g -= step[:, None] * G[j][None, :]
            ssr += np.where(accept, d_ssr, 0.0)
            acc_batch[:, j] += accept
        if fixed_sigma is None:
            u_new = u + np.exp(log_scale[:, p]) * z[p]
            s_old, s_new = np.exp(u), np.exp(u_new)

            def lp(s, uu):
                return -n * uu - ssr / (2 * s * s) - s * s / (2 * s0 * s0) + uu

            accept = logu[p] < lp(s_new, u_new) - lp(s_old, u)
            u = np.where(accept, u_new, u)
            acc_batch[:, p] += accept
        if (it + 1) % 100 == 0:
            g, ssr = refresh(W)  # shed accumulated rounding
        if it < warmup and (it + 1) % adapt_every == 0:
            n_batches += 1
            rate = acc_batch / adapt_every
            step_size = max(0.05, 1.0 / math.sqrt(n_batches))
            log_scale += np.where(rate > TARGET_ACCEPT[1], step_size, 0.0)
            log_scale -= np.where(rate < TARGET_ACCEPT[0], step_size, 0.0)
            np.clip(log_scale, log_floor, log_ceil, out=log_scale)
            acc_batch[:] = 0
        if it == warmup - 1:
            acc_batch[:] = 0
        if it >= warmup:
            k = it - warmup
            out_w[:, k] = W
            out_s[:, k] = np.exp(u) if fixed_sigma is None else fixed_sigma
    n_updates = p + (1 if fixed_sigma is None else 0)
    acc_kept = acc_batch[:, :n_updates].sum(1) / (draws * n_updates) if draws else acc_kept
    if draws and np.all(acc_kept < 0.01):
        raise SamplerError(f"all chains accept < 1% of proposals after adaptation: {acc_kept}")
    return RegressionPosterior(out_w, out_s, acc_kept, np.exp(log_scale))


def r_hat(draws) -> float:
    """Gelman-Rubin potential scale reduction for a chains x draws array."""
    draws = np.asarray(draws, float)
    m, n = draws.shape
    if m < 2 or n < 4:
        raise ValueError("need at least 2 chains of 4 draws")
    W = draws.var(axis=1, ddof=1).mean()
    if W <= 0:
        raise ValueError("zero within-chain variance; chains are degenerate")
    B = n * draws.mean(axis=1).var(ddof=1)
    return math.sqrt(((n - 1) / n * W + B / n) / W)


def mcse(draws) -> float:
    """Monte-Carlo standard error of the pooled mean by non-overlapping batch means."""
    draws = np.atleast_2d(np.asarray(draws, float))
    m, n = draws.shape
    b = max(1, int(math.sqrt(n)))
    k = n // b
    means = draws[:, : k * b].reshape(m, k, b).mean(-1).reshape(-1)
    return float(means.std(ddof=1) / math.sqrt(len(means)))


def posterior_predict(post: RegressionPosterior, theta, spec: MonomialSpec | None = None):
    """Predictive mean and variance at one point or a batch of points."""
    theta = np.asarray(theta, float)
    single = theta.ndim == 1
    D = design_matrix(np.atleast_2d(theta), spec)
    Wd = post.weight_draws.reshape(-1, post.weight_draws.shape[-1])
    if len(Wd) == 0:
        raise ValueError("posterior has no draws")
    # linear in w: moments of D @ w follow from the draws' mean and covariance
    w_bar = Wd.mean(0)
    dev = Wd - w_bar
    cov = dev.T @ dev / len(Wd)
    mean = D @ w_bar
    var = np.einsum("np,pq,nq->n", D, cov, D).clip(0.0) + np.mean(post.sigma_draws.reshape(-1) ** 2)
    return (mean[0], var[0]) if single else (mean, var)


@dataclass(frozen=True, eq=False)
class BayesRegModel:
    """Posterior plus the input standardizer; predicts from raw parameters."""

    posterior: RegressionPosterior
    standardizer: Standardizer

    @property
    def input_dim(self) -> int:
        return self.standardizer.dim

    def predict(self, x_raw):
        z = self.standardizer.standardize(np.atleast_2d(np.asarray(x_raw, float)))
        return posterior_predict(self.posterior, z)


def fit_bayes(x_raw, y, standardizer: Standardizer, **kw) -> BayesRegModel:
    X = design_matrix(standardizer.standardize(np.atleast_2d(x_raw)))
    return BayesRegModel(mcmc_sample(X, y, **kw), standardizer)


def write_posterior_csv(path, post: RegressionPosterior) -> None:
    p = post.weight_draws.shape[-1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain", "draw", *(f"w{i}" for i in range(p)), "sigma"])
        for c in range(post.n_chains):
            for k in range(post.n_draws):
                w.writerow([c, k, *map(repr, post.weight_draws[c, k].tolist()), repr(float(post.sigma_draws[c, k]))])


def read_posterior_csv(path) -> RegressionPosterior:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    chains = int(rows[:, 0].max()) + 1
    draws = int(rows[:, 1].max()) + 1
    p = rows.shape[1] - 3
    order = np.lexsort((rows[:, 1], rows[:, 0]))
    rows = rows[order]
    W = rows[:, 2:2 + p].reshape(chains, draws, p)
    S = rows[:, -1].reshape(chains, draws)
    return RegressionPosterior(W, S, np.full(chains, np.nan), np.full((chains, p + 1), np.nan))


def posterior_summary(post: RegressionPosterior) -> dict:
    p = post.parameter_draws()
    names = [f"w{i}" for i in range(p.shape[-1] - 1)] + ["sigma"]
    rh = post.r_hats()
    return {
        "chains": post.n_chains,
        "draws": post.n_draws,
        "acceptance_rates": [float(a) for a in post.acceptance_rates],
        "parameters": {nm: {"mean": float(p[..., k].mean()), "sd": float(p[..., k].std(ddof=1)),
                            "r_hat": float(rh[k])} for k, nm in enumerate(names)},
    }


def write_summary_json(path, post: RegressionPosterior) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(posterior_summary(post), fh, indent=2)
        fh.write("\n")
