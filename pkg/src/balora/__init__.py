"""Bayesian low-rank adaptation with exact low-rank predictive sampling.

Core pieces: a float64 tensor engine with a reverse-mode tape
(:mod:`balora.tensor`), adapter layers with input-adaptive Gaussian
posteriors (:mod:`balora.adapter`), the KL-regularized training objective
(:mod:`balora.variational`), Monte Carlo uncertainty quantification
(:mod:`balora.uncertainty`), synthetic tasks and baselines
(:mod:`balora.tasks`), and a CLI (:mod:`balora.cli`).
"""

__version__ = "0.1.0"

from .rng import Rng
from .tensor import Tensor, backward, no_grad

__all__ = ["Rng", "Tensor", "backward", "no_grad", "__version__"]
