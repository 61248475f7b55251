"""Sparse variational GP layer in the whitened parameterization."""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

from .kernels import MaternKernel, inv_softplus


class ConditioningError(RuntimeError):
    pass


def jitter_ladder(dtype) -> list[float]:
    if dtype == torch.float64:
        return [1e-8, 1e-7, 1e-6, 1e-5, 1e-4]
    # below float32 resolution a 1e-8 jitter is a no-op
    return [1e-6, 1e-5, 1e-4]


def safe_cholesky(K: torch.Tensor) -> tuple[torch.Tensor, float]:
    """Cholesky factor of ``K + jitter * I``, escalating jitter on failure."""
    eye = torch.eye(K.shape[-1], dtype=K.dtype)
    for jitter in jitter_ladder(K.dtype):
        L, info = torch.linalg.cholesky_ex(K + jitter * eye)
        if not torch.any(info):
            return L, jitter
    raise ConditioningError(f"Cholesky failed for a {K.shape[-1]}x{K.shape[-1]} kernel matrix "
                            f"with jitter up to {jitter_ladder(K.dtype)[-1]:g}")


class AffineMean(nn.Module):
    def __init__(self, input_dim: int, output_dim: int, dtype=torch.float64):
        super().__init__()
        # identity-padded projection: hidden layers start by passing inputs through
        self.weight = nn.Parameter(torch.eye(output_dim, input_dim, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(output_dim, dtype=dtype))

    def forward(self, x):
        return x @ self.weight.T + self.bias


class ConstantMean(nn.Module):
    def __init__(self, output_dim: int, value: float = 0.0, dtype=torch.float64):
        super().__init__()
        self.output_dim = output_dim
        self.constant = nn.Parameter(torch.tensor(value, dtype=dtype))

    def forward(self, x):
        return self.constant.expand(*x.shape[:-1], self.output_dim)


class SvgpLayer(nn.Module):
    """One GP layer with ``M`` inducing points shared by all output dimensions.

    The variational posterior over whitened inducing values is
    ``N(m_d, S_d S_d^T)`` per output dimension ``d``; ``S_d`` is lower
    triangular with a softplus-positive diagonal.
    """

    def __init__(self, input_dim: int, output_dim: int, inducing_points: torch.Tensor,
                 mean: str = "affine", nu: float = 2.5, chol_init: float = 1.0,
                 dtype=torch.float64):
        super().__init__()
        Z = torch.as_tensor(inducing_points, dtype=dtype)
        if Z.ndim != 2 or Z.shape[1] != input_dim:
            raise ValueError(f"inducing points must be M x {input_dim}, got {tuple(Z.shape)}")
        M = Z.shape[0]
        self.input_dim, self.output_dim, self.n_inducing = input_dim, output_dim, M
        self.inducing_points = nn.Parameter(Z.clone())
        self.variational_mean = nn.Parameter(torch.zeros(M, output_dim, dtype=dtype))
        self.chol_lower = nn.Parameter(torch.zeros(output_dim, M, M, dtype=dtype))
        self.raw_chol_diag = nn.Parameter(inv_softplus(torch.full((output_dim, M), chol_init, dtype=dtype)))
        self.kernel = MaternKernel(input_dim, nu=nu, dtype=dtype)
        if mean == "affine":
            self.mean_fn = AffineMean(input_dim, output_dim, dtype=dtype)
        elif mean == "constant":
            self.mean_fn = ConstantMean(output_dim, dtype=dtype)
        else:
            raise ValueError(f"unknown mean function {mean!r}")
        self.mean_kind = mean

    def variational_chol(self) -> torch.Tensor:
        return torch.tril(self.chol_lower, -1) + torch.diag_embed(F.softplus(self.raw_chol_diag))

    def set_variational(self, mean: torch.Tensor, chol: torch.Tensor) -> None:
        """Overwrite the variational parameters (``chol`` needs a positive diagonal)."""
        with torch.no_grad():
            self.variational_mean.copy_(mean)
            self.chol_lower.copy_(torch.tril(chol, -1))
            self.raw_chol_diag.copy_(inv_softplus(torch.diagonal(chol, dim1=-2, dim2=-1)))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Marginal predictive mean and variance, each ``N x output_dim``."""
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"layer expects {self.input_dim} inputs, got {x.shape[-1]}")
        Z = self.inducing_points
        L, jitter = safe_cholesky(self.kernel(Z))
        A = torch.linalg.solve_triangular(L, self.kernel(Z, x), upper=False)  # M x N
        mean = self.mean_fn(x) + A.T @ self.variational_mean
        SA = self.variational_chol().transpose(-1, -2) @ A  # D x M x N
        var = (self.kernel.diag(x) - (A * A).sum(0)).unsqueeze(-1) + (SA * SA).sum(-2).T
        return mean, var.clamp_min(jitter)

    def kl_divergence(self) -> torch.Tensor:
        """KL(q(u) || p(u)) summed over output dimensions, whitened prior N(0, I)."""
        S = self.variational_chol()
        m = self.variational_mean
        log_det = 2.0 * torch.log(torch.diagonal(S, dim1=-2, dim2=-1)).sum()
        return 0.5 * ((S * S).sum() + (m * m).sum() - self.output_dim * self.n_inducing - log_det)
