from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .model import DsppModel, NonFiniteLossError, dspp_objective

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


class DivergenceError(RuntimeError):
    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    lr: float = 0.1
    decay_epochs: tuple[int, ...] = (100, 250, 350, 450)
    decay_factor: float = 0.1
    batch_size: int = 1000
    kl_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        d = self.decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError("decay_epochs must be strictly increasing")
        if d and d[-1] >= self.epochs and self.epochs > 0:
            raise ValueError("decay_epochs must lie below the epoch count")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0 or self.kl_weight <= 0:
            raise ValueError("invalid training configuration")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: multiply by ``decay_factor`` at every listed epoch."""
    n_decays = sum(1 for e in cfg.decay_epochs if epoch >= e)
    return cfg.lr * cfg.decay_factor ** n_decays


def train(model: DsppModel, x_raw, y, cfg: TrainConfig = TrainConfig()) -> tuple[DsppModel, list[float]]:
    """Fit ``model`` in place with Adam; returns the model and the per-epoch mean loss.

    Inputs are raw bin centres and are standardized with the model's
    standardizer; targets are probabilities, mapped through the model's
    target transform. Mini-batches are reshuffled every epoch from ``cfg.seed``.
    """
    x = np.atleast_2d(np.asarray(x_raw, float))
    if model.standardizer is not None:
        x = model.standardizer.standardize(x)
    X = torch.as_tensor(x, dtype=model.dtype)
    Y = torch.as_tensor(model.encode_targets(y), dtype=model.dtype)
    n = X.shape[0]
    if n == 0:
        raise ValueError("no training data")
    batch = min(cfg.batch_size, n)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    trace: list[float] = []
    model.train()
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(epoch, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        n_batches = 0
        for start in range(0, n, batch):
            idx = perm[start:start + batch]
            opt.zero_grad()
            try:
                loss = dspp_objective(model, X[idx], Y[idx], n, cfg.kl_weight)
            except NonFiniteLossError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch}: {exc}", trace) from exc
            loss.backward()
            opt.step()
            total += loss.item()
            n_batches += 1
        trace.append(total / n_batches)
        w_sum = float(model.quadrature.weights.detach().sum())
        assert abs(w_sum - 1.0) < 1e-5, f"quadrature weights sum to {w_sum}"
        if not np.isfinite(trace[-1]) or trace[-1] > DIVERGENCE_LIMIT:
            raise DivergenceError(f"training diverged at epoch {epoch}: loss {trace[-1]:.4g}", trace)
        if epoch % 50 == 0 or epoch == cfg.epochs - 1:
            log.debug("epoch %d lr %.1e loss %.4f", epoch, lr, trace[-1])
    model.eval()
    return model, trace
