"""Shapley values of ReLU neurons: attribution, relevance propagation and Shapley-gradient training."""

from .shapley_core import (
    ApproxStats,
    BiasMode,
    Method,
    NeuronView,
    ShapGradient,
    ShapleyResult,
    approx_shapley,
    approx_stats,
    exact_shapley,
    gate_profile,
    mc_shapley,
    sa_gradient,
    sa_value,
    shapley_gradient,
)
from .special import norm_cdf, norm_pdf

__version__ = "0.1.0"
