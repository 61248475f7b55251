"""Accuracy metrics, ablation importance, reduced models and trigger regions.

Predictors here are any object with ``predict(x_raw) -> (mean, variance)``,
``input_dim`` and a ``standardizer``; both the DSPP and the Bayesian
regression model qualify.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage

from .datamodel import StateDataset, Standardizer, fit_standardizer, split_train_test
from .preprocess import BinnedSample, binned_arrays, build_binned_dataset

MAPE_FLOOR = 1e-9


class Predictor(Protocol):
    standardizer: Standardizer

    @property
    def input_dim(self) -> int: ...

    def predict(self, x_raw): ...


@dataclass(frozen=True)
class EvalReport:
    state: str
    model_id: str
    mape: float
    r_squared: float
    n_test: int


@dataclass(frozen=True)
class ImportanceReport:
    ranking: tuple[str, ...]
    mape_deltas: dict[str, float]
    baseline_mape: float = float("nan")

    def to_dict(self) -> dict:
        return {"ranking": list(self.ranking), "mape_deltas": dict(self.mape_deltas),
                "baseline_mape": self.baseline_mape}

    @classmethod
    def from_dict(cls, d: dict) -> "ImportanceReport":
        return cls(tuple(d["ranking"]), dict(d["mape_deltas"]), d.get("baseline_mape", float("nan")))


@dataclass(frozen=True)
class TriggerRegion:
    threshold: float
    cells: frozenset
    bounding_box: tuple[tuple[float, float], ...]

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "cells": [list(c) for c in sorted(self.cells)],
                "bounding_box": [list(b) for b in self.bounding_box]}


def mape(pred, truth) -> float:
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    bad = np.flatnonzero(np.abs(truth) < MAPE_FLOOR)
    if len(bad):
        raise ValueError(f"truth values below {MAPE_FLOOR:g} at indices {bad.tolist()}")
    return float(np.mean(np.abs(pred - truth) / np.abs(truth)))


def r_squared(pred, truth) -> float:
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    if pred.shape != truth.shape or len(truth) < 2:
        raise ValueError("need two equal-length vectors with at least 2 points")
    ss_tot = float(np.sum((truth - truth.mean()) ** 2))
    if ss_tot == 0:
        raise ValueError("truth is constant; R-squared undefined")
    return 1.0 - float(np.sum((truth - pred) ** 2)) / ss_tot


def evaluate(model: Predictor, test: Sequence[BinnedSample], state: str = "", model_id: str = "") -> EvalReport:
    X, y = binned_arrays(test)
    mean, _ = model.predict(X)
    return EvalReport(state, model_id, mape(mean, y), r_squared(mean, y), len(y))


def ablate_importance(model: Predictor, test: Sequence[BinnedSample],
                      names: Sequence[str]) -> ImportanceReport:
    """Rank inputs by the MAPE increase when each is set to zero in standardized space.

    Zero in standardized coordinates is the training mean, so ablation is
    mean imputation of the raw value.
    """
    X, y = binned_arrays(test)
    names = list(names)
    if X.shape[1] != len(names):
        raise ValueError(f"{len(names)} names for {X.shape[1]} inputs")
    base = mape(model.predict(X)[0], y)
    deltas = {}
    for i, name in enumerate(names):
        Xa = X.copy()
        Xa[:, i] = model.standardizer.means[i]
        deltas[name] = mape(model.predict(Xa)[0], y) - base
    order = sorted(range(len(names)), key=lambda i: (-deltas[names[i]], i))
    return ImportanceReport(tuple(names[i] for i in order), deltas, base)


@dataclass
class StatePipeline:
    """What is needed to rebuild and retrain a model on a parameter subset."""

    data: StateDataset
    selected: list[int]
    train_fn: object  # (x_train_raw, y_train, standardizer, seed) -> Predictor
    n_bins_target: int = 1500
    max_attempts: int | None = None
    n_test: int = 1000
    seed: int = 0
    bin_kwargs: dict = field(default_factory=dict)

    def fit(self, selected: Sequence[int], seed_offset: int = 0):
        """Bin over ``selected``, split, train; returns (model, train, test)."""
        selected = list(selected)
        binned = build_binned_dataset(self.data, selected, self.n_bins_target,
                                      seed=self.seed + seed_offset, max_attempts=self.max_attempts,
                                      **self.bin_kwargs)
        n_test = min(self.n_test, len(binned) // 2) if len(binned) <= self.n_test else self.n_test
        train, test = split_train_test(binned, n_test, seed=self.seed + seed_offset + 1)
        std = fit_standardizer(self.data, selected)
        Xtr, ytr = binned_arrays(train)
        model = self.train_fn(Xtr, ytr, std, self.seed + seed_offset + 2)
        return model, train, test


def retrain_reduced(pipeline: StatePipeline, importance: ImportanceReport, drop: Sequence[str]):
    """Retrain on the selected parameters minus ``drop`` (ranks like ``"second"``/``"third"`` or names).

    Bins are rebuilt over the remaining parameters only. Returns
    ``(model, remaining_names, train, test)``.
    """
    names = [pipeline.data.specs[i].name for i in pipeline.selected]
    rank_words = {"first": 0, "second": 1, "third": 2}
    dropped = set()
    for d in drop:
        dropped.add(importance.ranking[rank_words[d]] if d in rank_words else d)
    unknown = dropped - set(names)
    if unknown:
        raise KeyError(f"cannot drop unknown parameters {sorted(unknown)}")
    keep = [i for i, n in zip(pipeline.selected, names) if n not in dropped]
    if not keep:
        raise ValueError("at least one parameter must remain")
    model, train, test = pipeline.fit(keep, seed_offset=1000 * len(dropped))
    return model, [pipeline.data.specs[i].name for i in keep], train, test


# ---------------------------------------------------------------------------
# grids and trigger regions
# ---------------------------------------------------------------------------

def grid_axes(grid_spec: Sequence[tuple[float, float, int]]) -> list[np.ndarray]:
    """Cell centres per axis for ``(lo, hi, n_cells)`` specs."""
    if not grid_spec or any(int(n) < 1 for _, _, n in grid_spec):
        raise ValueError("empty grid")
    return [lo + (np.arange(int(n)) + 0.5) * (hi - lo) / int(n) for lo, hi, n in grid_spec]


def grid_points(grid_spec) -> np.ndarray:
    axes = grid_axes(grid_spec)
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.reshape(-1) for m in mesh])


def trigger_regions(model: Predictor, grid_spec, threshold: float) -> list[TriggerRegion]:
    """Face-connected groups of grid cells whose predicted mean reaches ``threshold``."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    if len(grid_spec) != model.input_dim:
        raise ValueError(f"grid has {len(grid_spec)} axes, model {model.input_dim} inputs")
    shape = tuple(int(n) for _, _, n in grid_spec)
    mean, _ = model.predict(grid_points(grid_spec))
    marked = mean.reshape(shape) >= threshold
    labels, n_regions = ndimage.label(marked)  # default structure: face adjacency
    steps = [(hi - lo) / int(n) for lo, hi, n in grid_spec]
    regions = []
    for r in range(1, n_regions + 1):
        idx = np.argwhere(labels == r)
        lo_i, hi_i = idx.min(0), idx.max(0)
        box = tuple((float(spec[0] + lo_i[a] * steps[a]), float(spec[0] + (hi_i[a] + 1) * steps[a]))
                    for a, spec in enumerate(grid_spec))
        regions.append(TriggerRegion(float(threshold), frozenset(map(tuple, idx.tolist())), box))
    return regions


def uncertainty_profile(model: Predictor, dense_region, empty_region, grid_spec) -> tuple[float, float]:
    """Mean predictive std over the grid cells inside each region.

    Regions are per-axis ``(lo, hi)`` boxes in raw units.
    """
    pts = grid_points(grid_spec)
    out = []
    for region in (dense_region, empty_region):
        if not region:
            raise ValueError("empty region spec")
        lo = np.array([r[0] for r in region])
        hi = np.array([r[1] for r in region])
        inside = np.all((pts >= lo) & (pts <= hi), axis=1)
        if not inside.any():
            raise ValueError(f"no grid cell centre inside region {region}")
        _, var = model.predict(pts[inside])
        out.append(float(np.mean(np.sqrt(var))))
    return out[0], out[1]
