"""Finite-difference gradient verification.

The numeric side only ever calls the forward pass, so it stays independent
of the backward rules it is checking.
"""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .autodiff import Tensor, backward, zero_grads

DEFAULT_STEP = 1e-5
DEFAULT_RTOL = 1e-4
DEFAULT_ATOL = 1e-7


def numeric_grad(f: Callable[[], Tensor], x: Tensor, h: float = DEFAULT_STEP) -> np.ndarray:
    """Central-difference gradient of scalar f with respect to x, elementwise.

    f must rebuild its forward pass on every call (it is re-evaluated after
    each in-place perturbation of x.data).
    """
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f().item()
        flat[i] = keep - h
        down = f().item()
        flat[i] = keep
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       atol: float = DEFAULT_ATOL) -> float:
    """max |a - n| / max(1, |n|) with a small absolute floor for zeros."""
    diff = np.abs(analytic - numeric) - atol
    return float(np.max(diff / np.maximum(1.0, np.abs(numeric))))


def check_gradients(f: Callable[[], Tensor], wrt: Mapping[str, Tensor],
                    h: float = DEFAULT_STEP, rtol: float = DEFAULT_RTOL) -> dict:
    """Compare analytic gradients of scalar f against central differences.

    Returns {name: max relative error}; raises AssertionError naming the
    first tensor that exceeds rtol.
    """
    zero_grads(wrt.values())
    loss = f()
    backward(loss)
    report = {}
    for name, t in wrt.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_grad(f, t, h=h)
        err = max_relative_error(analytic, numeric)
        report[name] = err
        if err > rtol:
            raise AssertionError(
                f"gradient mismatch for {name}: max relative error {err:.3e} > {rtol}")
    return report
