"""Deep sigma point process: stacked SVGP layers driven by quadrature branches.

Each branch ``s`` carries one site ``xi_s``; between layers the branch input
is ``mean + xi_s * sqrt(var)`` of the previous layer's marginal. The output
density is the mixture ``sum_s w_s N(y | mu_s, v_s + noise^2)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from numpy.polynomial.hermite_e import hermegauss
from scipy.cluster.vq import kmeans2
from scipy.special import expit
from torch import nn
from torch.nn import functional as F

from ..datamodel import Standardizer
from .kernels import inv_softplus
from .layers import SvgpLayer

DTYPES = {"float64": torch.float64, "float32": torch.float32}
TARGETS = ("identity", "logit")
LOGIT_EPS = 1e-4  # targets are clipped to [eps, 1 - eps] before the logit


class NonFiniteLossError(FloatingPointError):
    pass


class QuadratureRule(nn.Module):
    """Learnable sites and softmax-normalized weights."""

    def __init__(self, sites, weight_logits, dtype=torch.float64):
        super().__init__()
        self.sites = nn.Parameter(torch.as_tensor(sites, dtype=dtype).clone())
        self.weight_logits = nn.Parameter(torch.as_tensor(weight_logits, dtype=dtype).clone())

    @property
    def n_sites(self) -> int:
        return self.sites.shape[0]

    @property
    def weights(self) -> torch.Tensor:
        return torch.softmax(self.weight_logits, 0)

    @property
    def log_weights(self) -> torch.Tensor:
        return torch.log_softmax(self.weight_logits, 0)


def init_quadrature(S: int = 8, dtype=torch.float64) -> QuadratureRule:
    """Gauss-Hermite rule for a standard normal, weights normalized to one."""
    if S < 1:
        raise ValueError("need at least one quadrature site")
    x, w = hermegauss(S)
    w = w / w.sum()
    return QuadratureRule(x, np.log(w), dtype=dtype)


@dataclass(frozen=True)
class DsppArchitecture:
    input_dim: int = 3
    layer_dims: tuple[int, ...] = (5, 3, 3, 1)
    n_inducing: int = 300
    n_sites: int = 8
    nu: float = 2.5
    obs_noise_init: float = 0.01
    hidden_chol_init: float = 1.0
    dtype: str = "float32"
    target: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        if self.layer_dims[-1] != 1:
            raise ValueError("the last layer must have a single output")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_dims"] = list(self.layer_dims)
        return d


class DsppModel(nn.Module):
    def __init__(self, layers, quadrature: QuadratureRule, obs_noise: float = 0.01,
                 standardizer: Standardizer | None = None, arch: DsppArchitecture | None = None):
        super().__init__()
        self.layers = nn.ModuleList(layers)
        for prev, nxt in zip(self.layers[:-1], self.layers[1:]):
            if prev.output_dim != nxt.input_dim:
                raise ValueError(f"layer output {prev.output_dim} does not feed input {nxt.input_dim}")
        if self.layers[-1].output_dim != 1:
            raise ValueError("last layer must have one output")
        self.quadrature = quadrature
        dtype = quadrature.sites.dtype
        self.raw_obs_noise = nn.Parameter(inv_softplus(torch.tensor(obs_noise, dtype=dtype)))
        self.standardizer = standardizer
        self.arch = arch

    @property
    def dtype(self):
        return self.quadrature.sites.dtype

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def target(self) -> str:
        return self.arch.target if self.arch is not None else "identity"

    def encode_targets(self, y) -> np.ndarray:
        """Map probabilities to the space the likelihood lives in."""
        y = np.asarray(y, float)
        if self.target == "logit":
            y = np.clip(y, LOGIT_EPS, 1 - LOGIT_EPS)
            return np.log(y) - np.log1p(-y)
        return y

    @property
    def obs_noise(self) -> torch.Tensor:
        return F.softplus(self.raw_obs_noise)

    def kl_divergence(self) -> torch.Tensor:
        return sum(layer.kl_divergence() for layer in self.layers)

    def predict(self, x_raw, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
        return predict(self, x_raw, chunk=chunk)


def dspp_forward(model: DsppModel, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-branch output mean and variance, each ``S x N``, for standardized inputs."""
    xi = model.quadrature.sites
    S, N = xi.shape[0], x.shape[0]
    mean, var = model.layers[0](x)
    for layer in model.layers[1:]:
        if mean.ndim == 2:  # still shared by all branches
            h = mean.unsqueeze(0) + xi[:, None, None] * var.sqrt().unsqueeze(0)
        else:
            h = mean + xi[:, None, None] * var.sqrt()
        m, v = layer(h.reshape(S * N, -1))
        mean, var = m.reshape(S, N, -1), v.reshape(S, N, -1)
    if mean.ndim == 2:  # single-layer model
        mean, var = mean.expand(S, N, 1), var.expand(S, N, 1)
    return mean[..., 0], var[..., 0]


def dspp_objective(model: DsppModel, x: torch.Tensor, y: torch.Tensor, n_total: int,
                   beta: float = 1.0) -> torch.Tensor:
    """Regularized negative log likelihood of the quadrature mixture.

    ``-(n_total / |batch|) * sum_i log sum_s w_s N(y_i | mu_s, v_s + noise^2) + beta * KL``
    """
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    mu, v = dspp_forward(model, x)
    total_var = v + model.obs_noise ** 2
    log_lik = -0.5 * (math.log(2 * math.pi) + torch.log(total_var) + (y - mu) ** 2 / total_var)
    mix = torch.logsumexp(log_lik + model.quadrature.log_weights[:, None], dim=0)
    loss = -(n_total / x.shape[0]) * mix.sum() + beta * model.kl_divergence()
    if not torch.isfinite(loss):
        with torch.no_grad():
            per_branch = log_lik.sum(1)
        raise NonFiniteLossError(
            f"non-finite loss {loss.item()}; per-branch log likelihood min "
            f"{per_branch.min().item():.4g}, max {per_branch.max().item():.4g}; "
            f"KL {model.kl_divergence().item():.4g}")
    return loss


def objective_and_grads(model: DsppModel, x, y, n_total: int, beta: float = 1.0):
    """Loss value and a ``name -> gradient`` dict for every trainable parameter."""
    model.zero_grad()
    x = torch.as_tensor(x, dtype=model.dtype)
    y = torch.as_tensor(y, dtype=model.dtype)
    loss = dspp_objective(model, x, y, n_total, beta)
    loss.backward()
    grads = {n: p.grad.detach().clone() for n, p in model.named_parameters()}
    return loss.item(), grads


def mixture_moments(weights, mu, var, noise2):
    """Mean and variance of ``sum_s w_s N(mu_s, var_s + noise2)`` along axis 0."""
    weights = np.asarray(weights, float)[:, None]
    mean = (weights * mu).sum(0)
    spread = np.clip((weights * mu * mu).sum(0) - mean * mean, 0.0, None)
    return mean, (weights * var).sum(0) + noise2 + spread


def logistic_mixture_moments(weights, mu, var, noise2, n_nodes: int = 32):
    """Mean and variance of ``sigmoid(f)`` for ``f ~ sum_s w_s N(mu_s, var_s + noise2)``."""
    nodes, hw = hermegauss(n_nodes)
    hw = hw / hw.sum()
    sd = np.sqrt(np.asarray(var, float) + noise2)[..., None]
    p = expit(np.asarray(mu, float)[..., None] + sd * nodes)
    m_s, e2_s = p @ hw, (p * p) @ hw
    weights = np.asarray(weights, float)[:, None]
    mean = (weights * m_s).sum(0)
    return mean, np.clip((weights * e2_s).sum(0) - mean * mean, 0.0, None)


@torch.no_grad()
def predict(model: DsppModel, x_raw, chunk: int = 4096, standardized: bool = False):
    """Predictive mean and variance of the mixture at raw (or standardized) inputs.

    Models fit on logit targets report moments of the back-transformed
    probability.
    """
    x = np.atleast_2d(np.asarray(x_raw, dtype=float))
    if not standardized and model.standardizer is not None:
        x = model.standardizer.standardize(x)
    if x.shape[1] != model.input_dim:
        raise ValueError(f"model expects {model.input_dim} inputs, got {x.shape[1]}")
    w = model.quadrature.weights.double().numpy()
    noise2 = float(model.obs_noise.double() ** 2)
    means, variances = [], []
    for start in range(0, x.shape[0], chunk):
        xt = torch.as_tensor(x[start:start + chunk], dtype=model.dtype)
        mu, v = dspp_forward(model, xt)
        moments = logistic_mixture_moments if model.target == "logit" else mixture_moments
        m, s2 = moments(w, mu.double().numpy(), v.double().numpy(), noise2)
        means.append(m)
        variances.append(s2)
    if not means:
        return np.empty(0), np.empty(0)
    return np.concatenate(means), np.concatenate(variances)


def _init_inducing(x: np.ndarray, M: int, rng: np.random.Generator) -> np.ndarray:
    if x.shape[0] > M:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            centres, _ = kmeans2(x, M, minit="++", seed=rng)
        return centres
    extra = x[rng.integers(0, x.shape[0], M - x.shape[0])]
    return np.vstack([x, extra + 0.05 * rng.standard_normal(extra.shape)])


def build_dspp(train_x: np.ndarray, arch: DsppArchitecture = DsppArchitecture(),
               standardizer: Standardizer | None = None, seed: int = 0) -> DsppModel:
    """Fresh model whose first-layer inducing points are k-means centres of ``train_x``.

    ``train_x`` is in standardized coordinates. Hidden-layer inducing points
    start as standard-normal draws.
    """
    train_x = np.atleast_2d(np.asarray(train_x, float))
    if train_x.shape[1] != arch.input_dim:
        raise ValueError(f"training inputs have {train_x.shape[1]} dims, architecture {arch.input_dim}")
    dtype = DTYPES[arch.dtype]
    rng = np.random.default_rng(seed)
    layers, d_in = [], arch.input_dim
    for li, d_out in enumerate(arch.layer_dims):
        if li == 0:
            Z = _init_inducing(train_x, arch.n_inducing, rng)
        else:
            Z = rng.standard_normal((arch.n_inducing, d_in))
        last = li == len(arch.layer_dims) - 1
        layers.append(SvgpLayer(d_in, d_out, torch.as_tensor(Z), mean="constant" if last else "affine",
                                nu=arch.nu, chol_init=1.0 if last else arch.hidden_chol_init, dtype=dtype))
        d_in = d_out
    return DsppModel(layers, init_quadrature(arch.n_sites, dtype=dtype), arch.obs_noise_init,
                     standardizer, arch)
