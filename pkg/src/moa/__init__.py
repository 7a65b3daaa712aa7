"""Mixture-of-attention-heads layer with a verifiable autodiff core.

A router picks k of E attention experts per token (experts share key/value
projections), auxiliary losses keep expert loads balanced, and everything is
built on a small float64 reverse-mode autodiff engine so each piece can be
checked against finite differences and brute-force oracles.
"""

from .autodiff import Tensor, backward, parameter, stop_gradient, tensor

__all__ = ["Tensor", "backward", "parameter", "stop_gradient", "tensor"]
__version__ = "0.1.0"
