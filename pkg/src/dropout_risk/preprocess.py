"""Random weather bins and robust per-bin dropout probabilities.

A bin is an axis-aligned box centred at a random point of a state's
parameter ranges, with side ``range / 12`` per parameter. Bins holding at
least ``MIN_MEMBERS`` measurements yield one training pair
``(centre, median-of-means dropout probability)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datamodel import Measurement, StateDataset

MIN_MEMBERS = 4000
N_GROUPS = 24
MIN_GROUP_INDEX = 20  # the largest group index k must exceed this
WIDTH_DIVISOR = 12.0


class BinTooSmallError(ValueError):
    pass


class DegenerateRangeError(ValueError):
    pass


class EmptyBinsError(RuntimeError):
    """No candidate bin reached the membership threshold."""

    def __init__(self, attempts: int, best_count: int, min_members: int):
        self.attempts = attempts
        self.best_count = best_count
        super().__init__(
            f"0 of {attempts} candidate bins accepted (acceptance rate 0.0); "
            f"largest candidate held {best_count} measurements, {min_members} required")


def _as_rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass(frozen=True)
class BinSpec:
    centers: tuple[float, ...]
    widths: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "centers", tuple(float(c) for c in self.centers))
        object.__setattr__(self, "widths", tuple(float(w) for w in self.widths))
        if len(self.centers) != len(self.widths):
            raise ValueError("centers and widths differ in length")
        if any(not w > 0 for w in self.widths):
            raise ValueError("bin widths must be positive")

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        a, w = np.asarray(self.centers), np.asarray(self.widths)
        return a - w / 2, a + w / 2


@dataclass(frozen=True)
class BinnedSample:
    centers: tuple[float, ...]
    p_D: float
    n_members: int
    q: int

    def __post_init__(self):
        object.__setattr__(self, "centers", tuple(float(c) for c in self.centers))
        assert self.n_members >= MIN_MEMBERS, f"bin with {self.n_members} < {MIN_MEMBERS} members"
        assert self.n_members // self.q - 1 > MIN_GROUP_INDEX, "too few median-of-means groups"
        assert 0.0 <= self.p_D <= 1.0, f"p_D={self.p_D} outside [0, 1]"


def bin_widths(data: StateDataset, selected: Sequence[int]) -> np.ndarray:
    widths = []
    for i in selected:
        lo, hi = data.param_ranges[i]
        if not hi > lo:
            raise DegenerateRangeError(
                f"parameter {data.specs[i].name!r} has a degenerate range [{lo}, {hi}]")
        widths.append(abs(hi - lo) / WIDTH_DIVISOR)
    return np.asarray(widths)


def sample_bin_spec(data: StateDataset, selected: Sequence[int], rng_seed=None) -> BinSpec:
    widths = bin_widths(data, selected)
    lo = np.array([data.param_ranges[i][0] for i in selected])
    hi = np.array([data.param_ranges[i][1] for i in selected])
    u = _as_rng(rng_seed).random(len(selected))
    return BinSpec(lo + u * (hi - lo), widths)


def bin_membership(m: Measurement, spec: BinSpec, selected: Sequence[int]) -> bool:
    lo, hi = spec.bounds()
    return all(lo[k] <= m.params[i] <= hi[k] for k, i in enumerate(selected))


def choose_group_size(N: int) -> int:
    """Group size giving ``N_GROUPS`` complete groups (largest index 23 > 20)."""
    if N < MIN_MEMBERS:
        raise BinTooSmallError(f"bin holds {N} measurements; at least {MIN_MEMBERS} required")
    return N // N_GROUPS


def median_of_means(values, q: int) -> float:
    """Median of the means of consecutive, complete groups of ``q`` values.

    A trailing remainder shorter than ``q`` is discarded. Group sums are
    exactly rounded (``math.fsum``) so the result does not depend on the
    summation order; each mean is clamped to its group's range, which the
    division by ``q`` can otherwise overshoot by one ulp.
    """
    values = np.asarray(values, dtype=float).reshape(-1)
    if q < 1:
        raise ValueError("group size must be >= 1")
    if q > len(values):
        raise ValueError(f"group size {q} exceeds the {len(values)} values")
    n_groups = len(values) // q
    groups = values[: n_groups * q].reshape(n_groups, q)
    means = sorted(min(max(math.fsum(g) / q, lo), hi)
                   for g, lo, hi in zip(groups, groups.min(1), groups.max(1)))
    mid = n_groups // 2
    if n_groups % 2:
        return means[mid]
    return (means[mid - 1] + means[mid]) / 2


class _SortedIndex:
    """Per-parameter sort order for range queries on one state's rows."""

    def __init__(self, params: np.ndarray, selected: Sequence[int]):
        self.cols = [np.ascontiguousarray(params[:, i]) for i in selected]
        self.order = [np.argsort(c, kind="stable") for c in self.cols]
        self.sorted = [c[o] for c, o in zip(self.cols, self.order)]

    def slice_bounds(self, lo: np.ndarray, hi: np.ndarray):
        """Vectorized closed-interval [lo, hi] slices, one row per candidate."""
        starts = np.stack([np.searchsorted(s, lo[:, k], "left") for k, s in enumerate(self.sorted)], 1)
        stops = np.stack([np.searchsorted(s, hi[:, k], "right") for k, s in enumerate(self.sorted)], 1)
        return starts, stops

    def members(self, lo, hi, start, stop) -> np.ndarray:
        k = int(np.argmin(stop - start))
        idx = self.order[k][start[k]:stop[k]]
        keep = np.ones(len(idx), dtype=bool)
        for j, col in enumerate(self.cols):
            if j != k:
                v = col[idx]
                keep &= (v >= lo[j]) & (v <= hi[j])
        return np.sort(idx[keep])


def build_binned_dataset(data: StateDataset, selected: Sequence[int], n_bins_target: int = 1500,
                         seed=0, *, min_members: int = MIN_MEMBERS, max_attempts: int | None = None,
                         shuffle: bool = False, batch_size: int = 512) -> list[BinnedSample]:
    """Sample bins until ``n_bins_target`` are accepted or attempts run out.

    Parameters
    ----------
    data : StateDataset
    selected : sequence of int
        Parameter columns spanning the bins.
    n_bins_target : int
        Number of accepted bins wanted.
    seed : int or numpy Generator
        Candidate centres come from this stream in order; the result does
        not depend on ``batch_size``.
    min_members : int
        Membership threshold (at least ``MIN_MEMBERS``).
    max_attempts : int, optional
        Candidate budget, default 50 x ``n_bins_target``.
    shuffle : bool
        Permute bin members (with a per-bin seed) before grouping instead
        of grouping in dataset order.
    """
    if min_members < MIN_MEMBERS:
        raise ValueError(f"min_members must be >= {MIN_MEMBERS}")
    if n_bins_target <= 0:
        return []
    selected = list(selected)
    max_attempts = 50 * n_bins_target if max_attempts is None else max_attempts
    rng = _as_rng(seed)

    valid = data.hours_checked > 0
    params = data.params[valid]
    p_rows = data.hours_dropout[valid] / data.hours_checked[valid]
    widths = bin_widths(data, selected)
    lo_range = np.array([data.param_ranges[i][0] for i in selected])
    span = np.array([data.param_ranges[i][1] for i in selected]) - lo_range
    index = _SortedIndex(params, selected)
    # spawned, not drawn: shuffling leaves the candidate stream untouched
    shuffle_seq = rng.bit_generator.seed_seq.spawn(1)[0] if shuffle else None

    out: list[BinnedSample] = []
    attempts = best = 0
    while len(out) < n_bins_target and attempts < max_attempts:
        nb = min(batch_size, max_attempts - attempts)
        centers = lo_range + rng.random((nb, len(selected))) * span
        lo, hi = centers - widths / 2, centers + widths / 2
        starts, stops = index.slice_bounds(lo, hi)
        upper = (stops - starts).min(1)
        for c in range(nb):
            attempts += 1
            if upper[c] >= min_members:
                idx = index.members(lo[c], hi[c], starts[c], stops[c])
                best = max(best, len(idx))
                if len(idx) >= min_members:
                    vals = p_rows[idx]
                    if shuffle:
                        vals = np.random.default_rng(shuffle_seq.spawn(1)[0]).permutation(vals)
                    q = choose_group_size(len(idx))
                    out.append(BinnedSample(tuple(centers[c]), median_of_means(vals, q), len(idx), q))
                    if len(out) == n_bins_target:
                        break
            else:
                best = max(best, int(upper[c]))
    if not out:
        raise EmptyBinsError(attempts, best, min_members)
    return out


def binned_arrays(samples: Sequence[BinnedSample]) -> tuple[np.ndarray, np.ndarray]:
    X = np.array([s.centers for s in samples], dtype=float)
    y = np.array([s.p_D for s in samples], dtype=float)
    return X, y


def write_binned_csv(path, samples: Sequence[BinnedSample], n_dims: int | None = None) -> None:
    n = n_dims if n_dims is not None else (len(samples[0].centers) if samples else 0)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*(f"a_{i + 1}" for i in range(n)), "p_D", "n_members", "q"])
        for s in samples:
            w.writerow([*map(repr, s.centers), repr(s.p_D), s.n_members, s.q])


def read_binned_csv(path) -> list[BinnedSample]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n = len(header) - 3
        if header[n:] != ["p_D", "n_members", "q"] or header[:n] != [f"a_{i + 1}" for i in range(n)]:
            raise ValueError(f"{path}: not a binned-dataset file")
        return [BinnedSample(tuple(float(v) for v in row[:n]), float(row[n]), int(row[n + 1]),
                             int(row[n + 2])) for row in reader if row]
