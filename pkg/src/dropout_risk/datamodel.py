"""Domain types, CSV ingestion, standardization and the synthetic generator.

Measurements are stored column-wise inside :class:`StateDataset` (a state
can hold a few hundred thousand address-hours); :class:`Measurement` objects
are materialized on demand.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np


class SchemaError(ValueError):
    """CSV header does not match the configured weather-parameter schema."""


class DegenerateMeasurementError(ValueError):
    """A measurement with zero checked hours has no dropout probability."""


class ConfigError(ValueError):
    """Invalid configuration value."""


@dataclass(frozen=True)
class WeatherParamSpec:
    name: str
    unit: str = ""
    index: int = 0


def make_specs(names: Sequence[str], units: Sequence[str] | None = None) -> list[WeatherParamSpec]:
    units = list(units) if units is not None else [DEFAULT_UNITS.get(n, "") for n in names]
    specs = [WeatherParamSpec(n, u, i) for i, (n, u) in enumerate(zip(names, units))]
    validate_specs(specs)
    return specs


def validate_specs(specs: Sequence[WeatherParamSpec]) -> None:
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise SchemaError(f"duplicate parameter names in schema: {names}")
    if [s.index for s in specs] != list(range(len(specs))):
        raise SchemaError("parameter indices must be contiguous from 0")


DEFAULT_UNITS = {
    "temperature": "degC",
    "dew_point": "degC",
    "wind_speed": "m/s",
    "wind_gust": "m/s",
    "wind_direction": "deg",
    "precipitation": "mm/h",
    "snow_depth": "cm",
    "cloud_ceiling": "m",
    "visibility": "km",
    "sea_level_pressure": "hPa",
    "station_pressure": "hPa",
    "altimeter_setting": "hPa",
}

DEFAULT_PARAMS = ("temperature", "wind_speed", "precipitation")
DEFAULT_SPECS = make_specs(DEFAULT_PARAMS)


@dataclass(frozen=True)
class Measurement:
    state: str
    params: tuple[float, ...]
    hours_checked: float
    hours_dropout: float

    def __post_init__(self):
        if self.hours_checked < 0 or self.hours_dropout < 0:
            raise ValueError("hours must be nonnegative")
        if self.hours_dropout > self.hours_checked:
            raise ValueError("hours_dropout exceeds hours_checked")
        if not all(math.isfinite(p) for p in self.params):
            raise ValueError("non-finite weather parameter")


def dropout_probability(m: Measurement) -> float:
    """Fraction of checked hours in which the address was unresponsive."""
    if m.hours_checked <= 0:
        raise DegenerateMeasurementError(f"measurement in {m.state} has zero checked hours")
    return m.hours_dropout / m.hours_checked


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class StateDataset:
    """All measurements of one state, stored as read-only columns.

    ``params`` has shape (n_measurements, n_params); ``param_ranges`` holds
    the per-parameter (min, max) over the stored rows.
    """

    state: str
    specs: tuple[WeatherParamSpec, ...]
    params: np.ndarray
    hours_checked: np.ndarray
    hours_dropout: np.ndarray
    param_ranges: tuple[tuple[float, float], ...] = field(init=False)

    def __post_init__(self):
        params = _frozen(np.atleast_2d(self.params))
        if params.shape[0] == 0 or params.size == 0:
            params = params.reshape(0, len(self.specs))
        checked = _frozen(self.hours_checked).reshape(-1)
        dropout = _frozen(self.hours_dropout).reshape(-1)
        if params.shape[1] != len(self.specs):
            raise SchemaError(f"{params.shape[1]} parameter columns for {len(self.specs)} specs")
        if not (len(checked) == len(dropout) == params.shape[0]):
            raise ValueError("column lengths differ")
        if np.any(dropout > checked) or np.any(dropout < 0):
            raise ValueError("hours_dropout must lie in [0, hours_checked]")
        if not np.all(np.isfinite(params)):
            raise ValueError("non-finite weather parameter")
        object.__setattr__(self, "specs", tuple(self.specs))
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "hours_checked", checked)
        object.__setattr__(self, "hours_dropout", dropout)
        if len(checked):
            ranges = tuple((float(lo), float(hi)) for lo, hi in zip(params.min(0), params.max(0)))
        else:
            ranges = tuple((math.nan, math.nan) for _ in self.specs)
        object.__setattr__(self, "param_ranges", ranges)

    def __len__(self) -> int:
        return len(self.hours_checked)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.specs]

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown weather parameter {name!r}; have {self.names}") from None

    def measurement(self, j: int) -> Measurement:
        return Measurement(self.state, tuple(self.params[j]), float(self.hours_checked[j]),
                           float(self.hours_dropout[j]))

    @property
    def measurements(self) -> Iterator[Measurement]:
        return (self.measurement(j) for j in range(len(self)))

    def dropout_probabilities(self) -> np.ndarray:
        if np.any(self.hours_checked <= 0):
            raise DegenerateMeasurementError(f"{self.state}: rows with zero checked hours")
        return self.hours_dropout / self.hours_checked


CSV_STATE = "state"
CSV_CHECKED = "hours_checked"
CSV_DROPOUT = "hours_dropout"


def csv_header(schema: Sequence[WeatherParamSpec]) -> list[str]:
    return [CSV_STATE, *(s.name for s in schema), CSV_CHECKED, CSV_DROPOUT]


def load_csv(path, schema: Sequence[WeatherParamSpec] = DEFAULT_SPECS,
             states: Sequence[str] | None = None) -> tuple[dict[str, StateDataset], Counter]:
    """Read measurements and split them by state.

    Parameters
    ----------
    path : path-like
        CSV with header ``state,<param names...>,hours_checked,hours_dropout``.
    schema : sequence of WeatherParamSpec
        Expected parameter columns, in order.
    states : sequence of str, optional
        Allowed state codes; rows from other states are rejected.

    Returns
    -------
    datasets : dict
        State code to :class:`StateDataset`, in order of first appearance.
    rejections : collections.Counter
        Reason to count for every dropped row.
    """
    validate_specs(schema)
    expected = csv_header(schema)
    allowed = set(states) if states is not None else None
    n_params = len(schema)
    rows: dict[str, list[list[float]]] = {}
    rejections: Counter = Counter()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != expected:
            raise SchemaError(f"{path}: header {header} does not match expected {expected}")
        for rec in reader:
            if not rec:
                continue
            if len(rec) != len(expected):
                rejections["malformed_row"] += 1
                continue
            state = rec[0].strip()
            if allowed is not None and state not in allowed:
                rejections["unknown_state"] += 1
                continue
            fields = [f.strip() for f in rec[1:]]
            if any(f == "" for f in fields):
                rejections["missing_value"] += 1
                continue
            try:
                values = [float(f) for f in fields]
            except ValueError:
                rejections["unparseable_value"] += 1
                continue
            if not all(math.isfinite(v) for v in values):
                rejections["non_finite_value"] += 1
                continue
            checked, dropout = values[n_params], values[n_params + 1]
            if checked < 0 or dropout < 0:
                rejections["negative_hours"] += 1
                continue
            if dropout > checked:
                rejections["dropout_exceeds_checked"] += 1
                continue
            rows.setdefault(state, []).append(values)
    datasets = {}
    for state, vals in rows.items():
        arr = np.asarray(vals, dtype=float)
        datasets[state] = StateDataset(state, tuple(schema), arr[:, :n_params],
                                       arr[:, n_params], arr[:, n_params + 1])
    return datasets, rejections


def write_csv(path, datasets: Sequence[StateDataset]) -> None:
    """Write datasets in the ingestion format (round-trips through :func:`load_csv`)."""
    datasets = list(datasets)
    if not datasets:
        raise ValueError("nothing to write")
    schema = datasets[0].specs
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header(schema))
        for ds in datasets:
            if [s.name for s in ds.specs] != [s.name for s in schema]:
                raise SchemaError("datasets disagree on schema")
            for j in range(len(ds)):
                w.writerow([ds.state, *map(repr, ds.params[j].tolist()),
                            repr(float(ds.hours_checked[j])), repr(float(ds.hours_dropout[j]))])


@dataclass(frozen=True, eq=False)
class Standardizer:
    """Affine map to zero-mean, unit-variance coordinates."""

    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        means, stds = _frozen(self.means).reshape(-1), _frozen(self.stds).reshape(-1)
        if means.shape != stds.shape:
            raise ValueError("means and stds differ in length")
        if not np.all(stds > 0):
            raise ValueError("standard deviations must be positive")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stds", stds)

    @property
    def dim(self) -> int:
        return len(self.means)

    def standardize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.means) / self.stds

    def destandardize(self, z) -> np.ndarray:
        return np.asarray(z, dtype=float) * self.stds + self.means

    def subset(self, keep: Sequence[int]) -> "Standardizer":
        keep = list(keep)
        return Standardizer(self.means[keep], self.stds[keep])

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "stds": self.stds.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.asarray(d["means"], float), np.asarray(d["stds"], float))

    def __eq__(self, other):
        return (isinstance(other, Standardizer) and np.array_equal(self.means, other.means)
                and np.array_equal(self.stds, other.stds))


def fit_standardizer(data: StateDataset, selected: Sequence[int]) -> Standardizer:
    selected = list(selected)
    cols = data.params[:, selected]
    for k, i in enumerate(selected):
        if len(np.unique(cols[:, k])) < 2:
            raise ValueError(f"parameter {data.specs[i].name!r} is constant; cannot standardize")
    return Standardizer(cols.mean(0), cols.std(0, ddof=1))


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _truth_constant(z, level=0.1):
    return np.full(z.shape[0], level)


def _truth_smooth(z):
    # logistic ridge in the first coordinate, oscillation in the second,
    # a product interaction with the third
    t, w, p = z[:, 0], z[:, 1], z[:, 2]
    return (0.04 + 0.16 * _sigmoid(5.0 * (t - 0.2)) * (1.0 + 0.6 * np.sin(2.5 * w))
            + 0.05 * _sigmoid(4.0 * p) * (1.0 + np.tanh(2.0 * t * p)))


def _truth_theta1(z):
    return 0.05 + 0.25 * _sigmoid(4.0 * z[:, 0])


GROUND_TRUTHS: dict[str, Callable[..., np.ndarray]] = {
    "constant": _truth_constant,
    "smooth": _truth_smooth,
    "theta1_only": _truth_theta1,
}

# location/scale of the generator's latent coordinates in raw units
_RAW_LOC_SCALE = {
    "temperature": (15.0, 10.0),
    "wind_speed": (5.0, 2.0),
    "precipitation": (2.0, 1.0),
}


@dataclass(frozen=True)
class SyntheticConfig:
    """Desk-scale stand-in for one state's measurement log.

    Latent coordinates are uniform on ``[-1, 1]^d`` for the bulk of rows and
    uniform on ``[-tail_span, tail_span]^d`` for a ``tail_mass`` fraction, so
    the observed parameter ranges are wide while measurements stay dense in
    the middle (as typical weather is). Outlier rows come in contiguous
    bursts that share the weather of one event.
    """

    ground_truth: str = "smooth"
    n_measurements: int = 200_000
    noise_scale: float = 0.3
    heavy_tail_fraction: float = 0.0
    seed: int = 0
    state: str = "SY"
    specs: tuple[WeatherParamSpec, ...] = tuple(DEFAULT_SPECS)
    level: float = 0.1
    tail_mass: float = 0.02
    tail_span: float = 4.0
    burst_length: int = 200
    hours_range: tuple[int, int] = (24, 168)

    def __post_init__(self):
        if self.ground_truth not in GROUND_TRUTHS:
            raise ConfigError(f"unknown ground truth {self.ground_truth!r}; "
                              f"choose from {sorted(GROUND_TRUTHS)}")
        if self.n_measurements < 1:
            raise ConfigError("n_measurements must be >= 1")
        if not 0 <= self.noise_scale < 1:
            raise ConfigError("noise_scale must lie in [0, 1)")
        if not 0 <= self.heavy_tail_fraction < 1:
            raise ConfigError("heavy_tail_fraction must lie in [0, 1)")
        if len(self.specs) < 3:
            raise ConfigError("the generator needs at least 3 weather parameters")

    def truth_latent(self, z: np.ndarray) -> np.ndarray:
        fn = GROUND_TRUTHS[self.ground_truth]
        z = np.atleast_2d(np.asarray(z, float))
        p = fn(z, self.level) if self.ground_truth == "constant" else fn(z)
        if np.any(p < 0) or np.any(p > 1) or not np.all(np.isfinite(p)):
            raise ConfigError(f"ground truth {self.ground_truth!r} left [0, 1]")
        return p

    def loc_scale(self) -> tuple[np.ndarray, np.ndarray]:
        pairs = [_RAW_LOC_SCALE.get(s.name, (0.0, 1.0)) for s in self.specs]
        return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])

    def to_latent(self, raw) -> np.ndarray:
        loc, scale = self.loc_scale()
        return (np.asarray(raw, float) - loc) / scale

    def to_raw(self, z) -> np.ndarray:
        loc, scale = self.loc_scale()
        return np.asarray(z, float) * scale + loc

    def truth(self, raw) -> np.ndarray:
        """Ground-truth dropout probability at raw parameter values."""
        return self.truth_latent(self.to_latent(raw))


def generate_synthetic(cfg: SyntheticConfig) -> StateDataset:
    rng = np.random.default_rng(cfg.seed)
    n, d = cfg.n_measurements, len(cfg.specs)
    z = rng.uniform(-1.0, 1.0, size=(n, d))
    tail = rng.random(n) < cfg.tail_mass
    z[tail] = rng.uniform(-cfg.tail_span, cfg.tail_span, size=(int(tail.sum()), d))

    n_out = int(round(cfg.heavy_tail_fraction * n))
    outlier = np.zeros(n, dtype=bool)
    if n_out:
        L = max(1, min(cfg.burst_length, n_out))
        n_slots = n // L
        n_bursts = -(-n_out // L)
        if n_bursts > n_slots:
            raise ConfigError("heavy_tail_fraction too large for the burst length")
        starts = np.sort(rng.choice(n_slots, size=n_bursts, replace=False)) * L
        remaining = n_out
        for s in starts:
            k = min(L, remaining)
            outlier[s:s + k] = True
            centre = rng.uniform(-1.0, 1.0, size=d)
            z[s:s + k] = centre + 0.05 * rng.standard_normal((k, d))
            remaining -= k

    p = cfg.truth_latent(z[:, :3])
    if cfg.noise_scale > 0:
        conc = 1.0 / cfg.noise_scale ** 2 - 1.0
        # Beta with mean p; clip keeps both shape parameters positive
        pc = np.clip(p, 1e-9, 1 - 1e-9)
        rate = rng.beta(pc * conc, (1.0 - pc) * conc)
    else:
        rate = p.copy()
    if n_out:
        rate[outlier] = rng.uniform(0.5, 1.0, size=n_out)
    lo, hi = cfg.hours_range
    checked = rng.integers(lo, hi + 1, size=n).astype(float)
    dropout = np.minimum(rate * checked, checked)
    return StateDataset(cfg.state, tuple(cfg.specs), cfg.to_raw(z), checked, dropout)


def split_train_test(binned: Sequence, n_test: int = 1000, seed: int = 0) -> tuple[list, list]:
    binned = list(binned)
    if n_test >= len(binned):
        raise ValueError(f"n_test={n_test} must be smaller than the {len(binned)} samples")
    if n_test < 0:
        raise ValueError("n_test must be nonnegative")
    perm = np.random.default_rng(seed).permutation(len(binned))
    test_idx = set(perm[:n_test].tolist())
    train = [b for i, b in enumerate(binned) if i not in test_idx]
    test = [b for i, b in enumerate(binned) if i in test_idx]
    return train, test
