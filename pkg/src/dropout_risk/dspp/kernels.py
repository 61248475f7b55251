"""Matérn covariance with ARD lengthscales."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

SUPPORTED_NU = (0.5, 1.5, 2.5)


def inv_softplus(y):
    y = torch.as_tensor(y)
    return y + torch.log(-torch.expm1(-y))


def _matern_from_sq(r2: torch.Tensor, nu: float) -> torch.Tensor:
    # sqrt has an infinite slope at 0; clamping keeps coincident points finite
    r = torch.sqrt(r2.clamp_min(1e-30))
    if nu == 0.5:
        return torch.exp(-r)
    if nu == 1.5:
        s = math.sqrt(3.0) * r
        return (1.0 + s) * torch.exp(-s)
    if nu == 2.5:
        s = math.sqrt(5.0) * r
        return (1.0 + s + 5.0 / 3.0 * r2) * torch.exp(-s)
    raise ValueError(f"unsupported Matérn order {nu}; choose from {SUPPORTED_NU}")


def matern52(x, y, lengthscales, outputscale: float = 1.0) -> float:
    """Scalar Matérn-5/2 covariance between two points (reference form)."""
    x, y, ls = (np.asarray(v, dtype=float).reshape(-1) for v in (x, y, lengthscales))
    if not (x.shape == y.shape == ls.shape):
        raise ValueError(f"dimension mismatch: {x.shape}, {y.shape}, lengthscales {ls.shape}")
    r = float(np.sqrt(np.sum(((x - y) / ls) ** 2)))
    return outputscale * (1.0 + math.sqrt(5.0) * r + 5.0 * r * r / 3.0) * math.exp(-math.sqrt(5.0) * r)


class MaternKernel(nn.Module):
    """``outputscale * matern_nu(||(x - y) / lengthscales||)``.

    Lengthscales and outputscale are stored through an inverse softplus.
    """

    def __init__(self, input_dim: int, nu: float = 2.5, lengthscale: float = 1.0,
                 outputscale: float = 1.0, dtype=torch.float64):
        super().__init__()
        if nu not in SUPPORTED_NU:
            raise ValueError(f"unsupported Matérn order {nu}; choose from {SUPPORTED_NU}")
        self.input_dim = input_dim
        self.nu = float(nu)
        self.raw_lengthscale = nn.Parameter(inv_softplus(torch.full((input_dim,), lengthscale, dtype=dtype)))
        self.raw_outputscale = nn.Parameter(inv_softplus(torch.tensor(outputscale, dtype=dtype)))

    @property
    def lengthscale(self) -> torch.Tensor:
        return F.softplus(self.raw_lengthscale)

    @property
    def outputscale(self) -> torch.Tensor:
        return F.softplus(self.raw_outputscale)

    def _check(self, x):
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"inputs have {x.shape[-1]} dims, kernel expects {self.input_dim}")

    def forward(self, x1: torch.Tensor, x2: torch.Tensor | None = None) -> torch.Tensor:
        """Gram matrix between the rows of ``x1`` and ``x2`` (``x1`` with itself if omitted)."""
        self._check(x1)
        ls = self.lengthscale
        if x2 is None:
            # explicit differences: an exact zero diagonal
            diff = (x1.unsqueeze(-2) - x1.unsqueeze(-3)) / ls
            r2 = (diff * diff).sum(-1)
        else:
            self._check(x2)
            a, b = x1 / ls, x2 / ls
            r2 = ((a * a).sum(-1, keepdim=True) + (b * b).sum(-1).unsqueeze(-2)
                  - 2.0 * a @ b.transpose(-1, -2)).clamp_min(0.0)
        return self.outputscale * _matern_from_sq(r2, self.nu)

    def diag(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        return self.outputscale.expand(x.shape[:-1])
