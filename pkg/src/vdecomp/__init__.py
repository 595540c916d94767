"""Variational low-rank + sparse + noise decomposition of images.

``Y = L + S + N`` with ``L = A B^T``: a hierarchical Bayesian model whose
factor posteriors are produced by an amortized network (or a per-image
solver) and whose precision posteriors have closed-form updates.
"""

__version__ = "0.1.0"

from .distributions import GammaPosterior, GaussianFactorPosterior, Hyperparams, low_rank_moments, sample_factor
from .leaf_updates import LeafState, leaf_update_all
from .losses import LossBreakdown, Task, loss_total
from .network import DecompositionResult, Model, ModelConfig, build_model, decompose
from .solver import SolverConfig, generate_synthetic_lrs, solve_single_image

__all__ = [
    "DecompositionResult", "GammaPosterior", "GaussianFactorPosterior", "Hyperparams", "LeafState",
    "LossBreakdown", "Model", "ModelConfig", "SolverConfig", "Task", "build_model", "decompose",
    "generate_synthetic_lrs", "leaf_update_all", "loss_total", "low_rank_moments", "sample_factor",
    "solve_single_image",
]
