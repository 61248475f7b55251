import numpy as np
import pytest

from dropout_risk.datamodel import StateDataset, SyntheticConfig, generate_synthetic, make_specs


def make_dataset(params, checked=None, dropout=None, names=None, state="XX"):
    params = np.atleast_2d(np.asarray(params, float))
    n, d = params.shape
    names = names or [f"p{i}" for i in range(d)]
    checked = np.full(n, 100.0) if checked is None else np.asarray(checked, float)
    dropout = np.full(n, 10.0) if dropout is None else np.asarray(dropout, float)
    return StateDataset(state, tuple(make_specs(names)), params, checked, dropout)


@pytest.fixture(scope="session")
def smooth_state():
    """200k synthetic rows with 5% outlier bursts (shared by several modules' tests)."""
    cfg = SyntheticConfig(ground_truth="smooth", n_measurements=200_000, heavy_tail_fraction=0.05, seed=11)
    return cfg, generate_synthetic(cfg)
