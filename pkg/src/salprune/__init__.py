"""Saliency-steered channel pruning for CNN classifiers.

The package trains a selector network whose explanations are compact RBF
kernels over the input, then prunes a CNN with differentiable channel gates
under a joint accuracy / explanation / FLOPs-budget objective.
"""

__version__ = "0.1.0"

from salprune.masks import (
    Mask,
    MaskDistribution,
    RbfParams,
    apply_mask,
    bernoulli_param_grid,
    center_nonlinearity,
    harden_mask,
    independent_param_grid,
    mask_l0,
    mask_smoothness,
    sample_gumbel_sigmoid_mask,
    sample_random_rbf_params,
    sigma_nonlinearity,
)

__all__ = [
    "Mask",
    "MaskDistribution",
    "RbfParams",
    "apply_mask",
    "bernoulli_param_grid",
    "center_nonlinearity",
    "harden_mask",
    "independent_param_grid",
    "mask_l0",
    "mask_smoothness",
    "sample_gumbel_sigmoid_mask",
    "sample_random_rbf_params",
    "sigma_nonlinearity",
]
