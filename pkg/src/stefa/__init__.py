"""Semiparametric tensor factor analysis via iteratively projected SVD."""

__version__ = "0.1.0"

from .estimator import (DegenerateCoreError, EstimationError, HooiFit,
                        RankExceedsSpanError, StefaFit, estimate_ranks,
                        fit_stefa, hooi, load_fit, save_fit)
from .prediction import KernelSpec, kernel_weights, predict_stefa, predict_vanilla
from .sieve import (BasisSpec, SieveDesign, build_design, eval_basis,
                    eval_loading_function)
from .simlab import (SimConfig, SimInstance, generate, loss_function,
                     loss_remse, loss_subspace, noise_amplify_refit,
                     run_experiment)
from .tensor import matricize, mode_product, multi_mode_product, tensorize

__all__ = [
    "__version__",
    "BasisSpec", "SieveDesign", "build_design", "eval_basis",
    "eval_loading_function",
    "DegenerateCoreError", "EstimationError", "RankExceedsSpanError",
    "HooiFit", "StefaFit", "estimate_ranks", "fit_stefa", "hooi",
    "save_fit", "load_fit",
    "KernelSpec", "kernel_weights", "predict_stefa", "predict_vanilla",
    "SimConfig", "SimInstance", "generate", "loss_function", "loss_remse",
    "loss_subspace", "noise_amplify_refit", "run_experiment",
    "matricize", "tensorize", "mode_product", "multi_mode_product",
]
