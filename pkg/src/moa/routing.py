"""Expert routing: softmax probabilities, top-k selection, renormalized weights.

The production router computes per-token probabilities p = softmax(q W_g),
keeps the k largest, and renormalizes them as w_i = p_i / detach(sum of the
selected p). Blocking the gradient through the denominator means each
selected probability is trained toward its own share of the output error
rather than competing inside the normalizer; empirically this stabilizes
routing. The older noisy top-k gate is kept as a comparison baseline.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ConfigurationError(ValueError):
    """Invalid routing configuration (e.g. k out of range)."""


@dataclass
class RouterParams:
    """Routing matrices: w_gate is d_model x n_experts; w_noise only for the noisy gate."""
    w_gate: Tensor
    w_noise: Optional[Tensor] = None

    @property
    def n_experts(self) -> int:
        return self.w_gate.shape[1]


@dataclass
class RouterOutput:
    """Per-token routing decision.

    indices: [T, k] distinct expert ids, in descending-probability order
             (ties prefer the lower index).
    weights: [T, k] renormalized selection weights; each row sums to 1.
    probs:   [T, N] full softmax probabilities.
    logits:  [T, N] pre-softmax router logits.
    """
    indices: np.ndarray
    weights: Tensor
    probs: Tensor
    logits: Tensor

    @property
    def n_tokens(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]


def init_router(d_model: int, n_experts: int, rng: np.random.Generator,
                init_scale: float = 0.02, noisy: bool = False) -> RouterParams:
    w_gate = ad.parameter(rng.normal(0.0, init_scale, (d_model, n_experts)))
    w_noise = None
    if noisy:
        w_noise = ad.parameter(rng.normal(0.0, init_scale, (d_model, n_experts)))
    return RouterParams(w_gate=w_gate, w_noise=w_noise)


def topk_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k positions, largest first; ties broken toward lower index."""
    order = np.argsort(-values, axis=1, kind="stable")
    return order[:, :k]


def route(queries: Tensor, params: RouterParams, k: int,
          tag: str = "router") -> RouterOutput:
    """Select and weight k of N experts for every query row.

    The weights are differentiable with respect to queries and w_gate through
    the numerator only: w_i = p_i / stop_gradient(sum over selected p_j).
    """
    n = params.n_experts
    if k < 1 or k > n:
        raise ConfigurationError(f"k must satisfy 1 <= k <= {n}, got {k}")
    logits = ad.matmul(queries, params.w_gate, tag=tag)
    probs = ad.softmax(logits, axis=1)
    indices = topk_indices(probs.data, k)
    selected = ad.take_along(probs, indices)
    denom = ad.stop_gradient(ad.reduce_sum(selected, axis=1, keepdims=True))
    weights = ad.div(selected, denom)
    return RouterOutput(indices=indices, weights=weights, probs=probs, logits=logits)


def noisy_topk_gate(x: Tensor, params: RouterParams, k: int, train_mode: bool,
                    rng: Optional[np.random.Generator] = None) -> Tensor:
    """Baseline noisy top-k gate.

    H_i = (x W_g)_i + eps * softplus((x W_noise)_i) with eps standard normal
    per (token, expert) in train mode and 0 otherwise; the gate is a softmax
    over the top-k entries of H with the rest masked to -inf, so non-selected
    gates are exactly zero.
    """
    if params.w_noise is None:
        raise ConfigurationError("noisy gate requires w_noise")
    n = params.n_experts
    if k < 1 or k > n:
        raise ConfigurationError(f"k must satisfy 1 <= k <= {n}, got {k}")
    clean = ad.matmul(x, params.w_gate, tag="router")
    h = clean
    if train_mode:
        if rng is None:
            raise ConfigurationError("train_mode noisy gate requires an rng")
        eps = rng.standard_normal(clean.shape)
        noise_mag = ad.softplus(ad.matmul(x, params.w_noise, tag="router"))
        h = ad.add(clean, ad.mul(Tensor(eps), noise_mag))
    keep = topk_indices(h.data, k)
    mask = np.full(h.shape, -np.inf)
    np.put_along_axis(mask, keep, 0.0, axis=1)
    return ad.softmax(ad.add(h, Tensor(mask)), axis=1)


def moe_combine(gates: Tensor, expert_outputs: Sequence[Tensor]) -> Tensor:
    """y = sum_i gates_i * expert_outputs_i over the nonzero gates.

    `expert_outputs` carries one entry per nonzero gate, in ascending gate
    index order; zero-gate experts are never evaluated.
    """
    nonzero = np.flatnonzero(gates.data)
    if len(nonzero) != len(expert_outputs):
        raise ValueError(
            f"{len(nonzero)} nonzero gates but {len(expert_outputs)} expert outputs")
    out = None
    for pos, expert_out in zip(nonzero, expert_outputs):
        g = ad.reshape(ad.gather_rows(ad.reshape(gates, (-1, 1)), [pos]), (1,))
        term = ad.mul(g, expert_out)
        out = term if out is None else ad.add(out, term)
    return out
