"""Pipeline configuration: TOML file, flag overrides and a content hash.

The file has one table per stage, for example::

    seed = 0
    out = "runs/synthetic"

    [synthetic]
    states = ["SA", "SB"]
    n_measurements = 200000

    [dspp]
    epochs = 500

Keys left out keep their defaults. Overrides use dotted paths
(``dspp.epochs=20``) and are applied after the file is read.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from importlib import resources

from .datamodel import DEFAULT_PARAMS, ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class SyntheticSection:
    states: tuple[str, ...] = ("SA", "SB")
    columns: tuple[str, ...] = DEFAULT_PARAMS
    ground_truth: str = "smooth"
    n_measurements: int = 200_000
    noise_scale: float = 0.3
    heavy_tail_fraction: float = 0.05
    tail_mass: float = 0.02
    tail_span: float = 4.0


@dataclass(frozen=True)
class DataSection:
    input: str = ""  # empty: use the output of the synth stage
    columns: tuple[str, ...] = ()  # empty: same as synthetic.columns
    states: tuple[str, ...] = ()  # empty: every state in the file


@dataclass(frozen=True)
class FeatselSection:
    use_selection: bool = False  # True: train on the featsel representatives
    n_clusters: int = 3


@dataclass(frozen=True)
class PreprocessSection:
    params: tuple[str, ...] = DEFAULT_PARAMS
    n_bins_target: int = 1500
    min_members: int = 4000
    n_groups: int = 24
    max_attempts: int = 0  # 0: 50 x n_bins_target


@dataclass(frozen=True)
class DsppSection:
    layer_dims: tuple[int, ...] = (5, 3, 3, 1)
    n_inducing: int = 300
    n_sites: int = 8
    nu: float = 2.5
    dtype: str = "float32"
    target: str = "identity"  # or "logit"
    epochs: int = 500
    lr: float = 0.1
    decay_epochs: tuple[int, ...] = (100, 250, 350, 450)
    decay_factor: float = 0.1
    batch_size: int = 1000


@dataclass(frozen=True)
class BayesSection:
    chains: int = 6
    draws: int = 10_000
    warmup: int = 5_000


@dataclass(frozen=True)
class EvaluationSection:
    n_test: int = 1000


@dataclass(frozen=True)
class TriggerSection:
    thresholds: tuple[float, ...] = (0.2, 0.3)
    cells_per_axis: int = 25


@dataclass(frozen=True)
class FigureSection:
    cells_per_axis: int = 50
    n_errorbar_points: int = 20


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    out: str = "runs/default"
    jobs: int = 1
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    data: DataSection = field(default_factory=DataSection)
    featsel: FeatselSection = field(default_factory=FeatselSection)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    dspp: DsppSection = field(default_factory=DsppSection)
    bayes: BayesSection = field(default_factory=BayesSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    triggers: TriggerSection = field(default_factory=TriggerSection)
    figures: FigureSection = field(default_factory=FigureSection)

    def __post_init__(self):
        validate(self)

    @property
    def columns(self) -> tuple[str, ...]:
        return self.data.columns or self.synthetic.columns

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def config_hash(self) -> str:
        """SHA-256 of everything that can change an artifact.

        The output directory and worker count are excluded: neither alters
        any result.
        """
        d = self.to_dict()
        d.pop("out")
        d.pop("jobs")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def validate(cfg: PipelineConfig) -> None:
    pre = cfg.preprocess
    if len(pre.params) < 1 or len(set(pre.params)) != len(pre.params):
        raise ConfigError("preprocess.params must be non-empty and unique")
    missing = [p for p in pre.params if p not in cfg.columns]
    if missing:
        raise ConfigError(f"preprocess.params {missing} are not data columns {list(cfg.columns)}")
    if pre.n_groups != 24:
        raise ConfigError("only 24 median-of-means groups are supported")
    if pre.min_members < 4000:
        raise ConfigError("preprocess.min_members must be at least 4000")
    if pre.n_bins_target <= cfg.evaluation.n_test:
        raise ConfigError("preprocess.n_bins_target must exceed evaluation.n_test")
    if cfg.dspp.layer_dims[-1] != 1:
        raise ConfigError("dspp.layer_dims must end with 1")
    if cfg.dspp.target not in ("identity", "logit"):
        raise ConfigError("dspp.target must be 'identity' or 'logit'")
    if cfg.bayes.chains < 2 or cfg.bayes.draws < 4:
        raise ConfigError("bayes needs at least 2 chains and 4 draws")
    if not all(0 < t < 1 for t in cfg.triggers.thresholds):
        raise ConfigError("trigger thresholds must lie in (0, 1)")
    if cfg.jobs < 1:
        raise ConfigError("jobs must be >= 1")
    if not 1 <= cfg.featsel.n_clusters <= len(cfg.columns):
        raise ConfigError("featsel.n_clusters must lie in [1, number of columns]")


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(value, default, path: str):
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() not in ("true", "false", "1", "0"):
                raise ConfigError(f"{path}: expected a boolean, got {value!r}")
            return value.lower() in ("true", "1")
        return bool(value)
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        proto = default[0] if default else ""
        return tuple(_coerce(v.strip() if isinstance(v, str) else v, proto, path) for v in value)
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: cannot read {value!r} as {type(default).__name__}") from None
    return str(value)


def _merge(section, values: dict, prefix: str = ""):
    known = {f.name: f for f in fields(section)}
    updates = {}
    for key, value in values.items():
        path = f"{prefix}{key}"
        if key not in known:
            raise ConfigError(f"unknown config key {path!r}")
        current = getattr(section, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{path} must be a table")
            updates[key] = _merge(current, value, path + ".")
        else:
            updates[key] = _coerce(value, current, path)
    return replace(section, **updates)


def parse_overrides(items) -> dict:
    """``["dspp.epochs=20", "seed=3"]`` to a nested dict of strings."""
    out: dict = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node = out
        *parents, leaf = key.strip().split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value.strip()
    return out


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Read a TOML config (bundled synthetic config if ``path`` is None) and apply overrides."""
    if path is None:
        text = resources.files("dropout_risk").joinpath("configs/synthetic.toml").read_text("utf-8")
        values = tomllib.loads(text)
    else:
        try:
            with open(path, "rb") as fh:
                values = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    cfg = _merge(PipelineConfig(), values)
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg
