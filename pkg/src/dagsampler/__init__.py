"""Bayesian causal discovery by sampling DAGs and model parameters.

The package factors a directed acyclic graph into a real node-potential
vector and a binary edge mask, relaxes the induced node ordering with a
differentiable transport plan, and runs a preconditioned stochastic-gradient
MCMC sampler over potentials and model parameters while a small variational
network tracks the conditional edge posterior.  Exact reference posteriors,
graph metrics, and a batch-experiment CLI round out the library.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    CycleError,
    DagSamplerError,
    DataError,
    DegeneratePotentialError,
    NumericError,
)

__all__ = [
    "ConfigError",
    "CycleError",
    "DagSamplerError",
    "DataError",
    "DegeneratePotentialError",
    "NumericError",
    "__version__",
]
