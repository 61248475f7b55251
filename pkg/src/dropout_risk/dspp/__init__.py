from .kernels import MaternKernel, matern52
from .layers import ConditioningError, SvgpLayer, safe_cholesky
from .model import (
    DsppArchitecture,
    DsppModel,
    NonFiniteLossError,
    QuadratureRule,
    build_dspp,
    dspp_forward,
    dspp_objective,
    init_quadrature,
    logistic_mixture_moments,
    mixture_moments,
    objective_and_grads,
    predict,
)
from .snapshot import load_model, save_model
from .train import DivergenceError, TrainConfig, lr_at_epoch, train

__all__ = [
    "ConditioningError",
    "DivergenceError",
    "DsppArchitecture",
    "DsppModel",
    "MaternKernel",
    "NonFiniteLossError",
    "QuadratureRule",
    "SvgpLayer",
    "TrainConfig",
    "build_dspp",
    "dspp_forward",
    "dspp_objective",
    "init_quadrature",
    "load_model",
    "logistic_mixture_moments",
    "lr_at_epoch",
    "matern52",
    "mixture_moments",
    "objective_and_grads",
    "predict",
    "safe_cholesky",
    "train",
]
