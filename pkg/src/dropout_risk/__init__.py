"""Weather-conditioned internet dropout risk: binning, DSPP and Bayesian regressors, analysis."""

from .datamodel import (
    DEFAULT_PARAMS,
    Measurement,
    StateDataset,
    Standardizer,
    SyntheticConfig,
    WeatherParamSpec,
    generate_synthetic,
    load_csv,
)
from .preprocess import BinnedSample, build_binned_dataset, median_of_means

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_PARAMS",
    "BinnedSample",
    "Measurement",
    "StateDataset",
    "Standardizer",
    "SyntheticConfig",
    "WeatherParamSpec",
    "build_binned_dataset",
    "generate_synthetic",
    "load_csv",
    "median_of_means",
]
