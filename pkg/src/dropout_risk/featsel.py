"""Initial weather-parameter choice from correlations and UPGMA clustering."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .datamodel import DEFAULT_PARAMS, StateDataset

DROPOUT_LABEL = "dropout_probability"


class DistanceMatrixError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CorrelationMatrix:
    labels: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (len(self.labels), len(self.labels)):
            raise ValueError("matrix shape does not match labels")
        v.setflags(write=False)
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "values", v)

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "values": self.values.tolist()}

    @property
    def parameter_labels(self) -> list[str]:
        return [lab for lab in self.labels if lab != DROPOUT_LABEL]

    def parameter_distances(self) -> np.ndarray:
        """``1 - |corr|`` among the weather parameters (dropout row removed)."""
        keep = [i for i, lab in enumerate(self.labels) if lab != DROPOUT_LABEL]
        d = 1.0 - np.abs(self.values[np.ix_(keep, keep)])
        np.fill_diagonal(d, 0.0)
        return d

    def dropout_correlation(self) -> dict[str, float]:
        j = self.labels.index(DROPOUT_LABEL)
        return {lab: float(self.values[i, j]) for i, lab in enumerate(self.labels) if i != j}


@dataclass(frozen=True)
class Merge:
    cluster_a: int
    cluster_b: int
    height: float
    new_size: int


@dataclass(frozen=True)
class Dendrogram:
    """Agglomeration record; leaves are ``0..L-1`` and merge ``t`` creates cluster ``L+t``."""

    n_leaves: int
    merges: tuple[Merge, ...]

    def to_dict(self) -> dict:
        return {"n_leaves": self.n_leaves,
                "merges": [[m.cluster_a, m.cluster_b, m.height, m.new_size] for m in self.merges]}

    def cut(self, k: int) -> list[int]:
        """Flat cluster label per leaf after undoing the last ``k - 1`` merges.

        Labels are numbered by the smallest leaf index they contain.
        """
        if not 1 <= k <= self.n_leaves:
            raise ValueError(f"cannot cut {self.n_leaves} leaves into {k} clusters")
        members: dict[int, list[int]] = {i: [i] for i in range(self.n_leaves)}
        for t, m in enumerate(self.merges[: self.n_leaves - k]):
            members[self.n_leaves + t] = members.pop(m.cluster_a) + members.pop(m.cluster_b)
        groups = sorted(members.values(), key=min)
        labels = [0] * self.n_leaves
        for g, leaves in enumerate(groups):
            for leaf in leaves:
                labels[leaf] = g
        return labels


def pearson_matrix(data: StateDataset) -> CorrelationMatrix:
    """Pearson correlations among all parameters and per-row dropout probability.

    Constant columns are dropped with a warning.
    """
    if len(data) < 2:
        raise ValueError("need at least 2 measurements")
    cols = np.column_stack([data.params, data.dropout_probabilities()])
    labels = [*data.names, DROPOUT_LABEL]
    keep = [j for j in range(cols.shape[1]) if np.ptp(cols[:, j]) > 0]
    for j in set(range(cols.shape[1])) - set(keep):
        warnings.warn(f"{data.state}: column {labels[j]!r} is constant and was excluded", stacklevel=2)
    c = np.corrcoef(cols[:, keep], rowvar=False)
    c = np.clip((c + c.T) / 2, -1.0, 1.0)
    np.fill_diagonal(c, 1.0)
    return CorrelationMatrix(tuple(labels[j] for j in keep), c)


def _validate_distances(d) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise DistanceMatrixError("distance matrix must be square")
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise DistanceMatrixError("distances must be finite and nonnegative")
    if not np.array_equal(d, d.T):
        raise DistanceMatrixError("distance matrix is not symmetric")
    if np.any(np.diag(d) != 0):
        raise DistanceMatrixError("distance matrix needs a zero diagonal")
    return d


def upgma(distances) -> Dendrogram:
    """Average-linkage agglomerative clustering.

    Cluster distances are kept as exact rationals, so every height is the
    correctly rounded mean of the original member-pair distances and ties
    are detected exactly. Ties go to the lowest (id, id) pair of active
    clusters.
    """
    d = _validate_distances(distances)
    n = d.shape[0]
    if n == 0:
        raise DistanceMatrixError("empty distance matrix")
    size = {i: 1 for i in range(n)}
    dist: dict[tuple[int, int], Fraction] = {
        (i, j): Fraction(d[i, j]) for i in range(n) for j in range(i + 1, n)}
    merges = []
    for t in range(n - 1):
        (a, b), h = min(dist.items(), key=lambda kv: (kv[1], kv[0]))
        new = n + t
        na, nb = size.pop(a), size.pop(b)
        del dist[(a, b)]
        for c in list(size):
            dac = dist.pop((min(a, c), max(a, c)))
            dbc = dist.pop((min(b, c), max(b, c)))
            dist[(c, new)] = (na * dac + nb * dbc) / (na + nb)
        size[new] = na + nb
        merges.append(Merge(a, b, float(h), na + nb))
    return Dendrogram(n, tuple(merges))


def select_representatives(corr: CorrelationMatrix, dend: Dendrogram, k: int) -> list[str]:
    """One parameter per cluster: the member most correlated (in absolute value) with dropout.

    Returned in order of decreasing ``|corr|``.
    """
    names = corr.parameter_labels
    if dend.n_leaves != len(names):
        raise ValueError("dendrogram leaves do not match the correlation labels")
    if k > len(names):
        raise ValueError(f"k={k} exceeds the {len(names)} parameters")
    labels = dend.cut(k)
    strength = {lab: abs(v) for lab, v in corr.dropout_correlation().items()}
    best: dict[int, str] = {}
    for name, g in zip(names, labels):
        if g not in best or strength[name] > strength[best[g]]:
            best[g] = name
    return sorted(best.values(), key=lambda nm: (-strength[nm], names.index(nm)))


def default_selection(available: Sequence[str]) -> list[str]:
    missing = [p for p in DEFAULT_PARAMS if p not in available]
    if missing:
        raise KeyError(f"default parameters missing from data: {missing}")
    return list(DEFAULT_PARAMS)


def write_featsel_json(path, corr: CorrelationMatrix, dend: Dendrogram, representatives) -> None:
    payload = {"correlation": corr.to_dict(), "dendrogram": dend.to_dict(),
               "leaves": corr.parameter_labels, "representatives": list(representatives)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
