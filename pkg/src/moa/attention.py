"""Attention layers: routed mixture of attention experts, and plain multi-head.

An attention expert owns only its query and output projections; the key and
value projections are shared by all experts, so K W^k and V W^v are computed
once per layer call and reused. Per token, the router picks k of E experts
and the layer returns the weight-renormalized sum of their outputs. Matmuls
carry role tags so the complexity module can attribute MACs per operation.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .routing import ConfigurationError, RouterParams, RouterOutput, init_router, route

KED_PATTERN = re.compile(r"^(\d+)K(\d+)E(\d+)D$")


@dataclass(frozen=True)
class MoAConfig:
    """Mixture-of-attention-heads geometry: k selected of n_experts, each d_head wide."""
    k: int
    n_experts: int
    d_head: int
    d_model: int

    def __post_init__(self):
        if not 1 <= self.k <= self.n_experts:
            raise ConfigurationError(
                f"k={self.k} must satisfy 1 <= k <= n_experts={self.n_experts}")
        if self.d_head < 1 or self.d_model < 1:
            raise ConfigurationError("d_head and d_model must be positive")

    def notation(self) -> str:
        """Compact <k>K<E>E<d_head>D architecture descriptor."""
        return f"{self.k}K{self.n_experts}E{self.d_head}D"


@dataclass
class MoALayerParams:
    """Shared w_key/w_value, per-expert w_query/w_out, and the router."""
    w_key: Tensor
    w_value: Tensor
    w_query: list = field(default_factory=list)
    w_out: list = field(default_factory=list)
    router: RouterParams = None

    @property
    def n_experts(self) -> int:
        return len(self.w_query)

    @property
    def d_head(self) -> int:
        return self.w_key.shape[1]

    @property
    def d_model(self) -> int:
        return self.w_key.shape[0]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "w_key", self.w_key
        yield "w_value", self.w_value
        for i, w in enumerate(self.w_query):
            yield f"w_query.{i}", w
        for i, w in enumerate(self.w_out):
            yield f"w_out.{i}", w
        yield "router.w_gate", self.router.w_gate


@dataclass
class MHALayerParams:
    """Per-head projections for standard multi-head attention."""
    w_query: list
    w_key: list
    w_value: list
    w_out: list

    @property
    def n_heads(self) -> int:
        return len(self.w_query)

    @property
    def d_head(self) -> int:
        return self.w_query[0].shape[1]

    @property
    def d_model(self) -> int:
        return self.w_query[0].shape[0]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for group, tensors in (("w_query", self.w_query), ("w_key", self.w_key),
                               ("w_value", self.w_value), ("w_out", self.w_out)):
            for i, w in enumerate(tensors):
                yield f"{group}.{i}", w


def init_moa_layer(cfg: MoAConfig, rng: np.random.Generator,
                   init_scale: float = 0.02) -> MoALayerParams:
    dm, dh, e = cfg.d_model, cfg.d_head, cfg.n_experts
    return MoALayerParams(
        w_key=ad.parameter(rng.normal(0, init_scale, (dm, dh))),
        w_value=ad.parameter(rng.normal(0, init_scale, (dm, dh))),
        w_query=[ad.parameter(rng.normal(0, init_scale, (dm, dh))) for _ in range(e)],
        w_out=[ad.parameter(rng.normal(0, init_scale, (dh, dm))) for _ in range(e)],
        router=init_router(dm, e, rng, init_scale=init_scale),
    )


def init_mha_layer(d_model: int, n_heads: int, rng: np.random.Generator,
                   init_scale: float = 0.02) -> MHALayerParams:
    if d_model % n_heads != 0:
        raise ConfigurationError(f"d_model={d_model} not divisible by n_heads={n_heads}")
    dh = d_model // n_heads
    def make(rows, cols):
        return [ad.parameter(rng.normal(0, init_scale, (rows, cols)))
                for _ in range(n_heads)]
    return MHALayerParams(w_query=make(d_model, dh), w_key=make(d_model, dh),
                          w_value=make(d_model, dh), w_out=make(dh, d_model))


def causal_mask(n_rows: int, n_cols: int) -> np.ndarray:
    """Additive pre-softmax mask: 0 on and below the diagonal, -inf above."""
    mask = np.zeros((n_rows, n_cols))
    mask[np.triu_indices(n_rows, k=1, m=n_cols)] = -np.inf
    return mask


def _attend(q_proj: Tensor, k_proj: Tensor, v_proj: Tensor, d_head: int,
            mask_rows: Optional[np.ndarray], attn_dropout: float,
            rng, train: bool, mix_tag: str, score_tag: str) -> Tensor:
    scores = ad.scale(ad.matmul(q_proj, ad.transpose(k_proj), tag=score_tag),
                      1.0 / math.sqrt(d_head))
    if mask_rows is not None:
        scores = ad.add(scores, Tensor(mask_rows))
    att = ad.softmax(scores, axis=1)
    att = ad.dropout(att, attn_dropout, rng, train=train)
    return ad.matmul(att, v_proj, tag=mix_tag)


def mha_forward(q_seq: Tensor, k_seq: Tensor, v_seq: Tensor,
                params: MHALayerParams, causal: bool = False, *,
                attn_dropout: float = 0.0, rng=None,
                train: bool = False) -> Tensor:
    """Standard multi-head attention: per head, softmax(Q W^q (K W^k)^T / sqrt(d_h)) V W^v,
    projected back and summed over heads."""
    if q_seq.shape[1] != params.d_model:
        raise ad.DimensionError(
            f"query width {q_seq.shape} does not match layer d_model {params.d_model}")
    mask = causal_mask(q_seq.shape[0], k_seq.shape[0]) if causal else None
    out = None
    for i in range(params.n_heads):
        qp = ad.matmul(q_seq, params.w_query[i], tag="mha.q_proj")
        kp = ad.matmul(k_seq, params.w_key[i], tag="mha.k_proj")
        vp = ad.matmul(v_seq, params.w_value[i], tag="mha.v_proj")
        o = _attend(qp, kp, vp, params.d_head, mask, attn_dropout, rng, train,
                    mix_tag="mha.mix", score_tag="mha.scores")
        head_out = ad.matmul(o, params.w_out[i], tag="mha.out_proj")
        out = head_out if out is None else ad.add(out, head_out)
    return out


def expert_forward(q_t: Tensor, k_proj: Tensor, v_proj: Tensor,
                   expert_index: int, params: MoALayerParams) -> Tensor:
    """One expert on one query vector, with K/V projections precomputed."""
    if not 0 <= expert_index < params.n_experts:
        raise ValueError(f"expert index {expert_index} out of range "
                         f"(n_experts={params.n_experts})")
    q2 = ad.reshape(q_t, (1, params.d_model))
    qp = ad.matmul(q2, params.w_query[expert_index], tag="moa.q_proj")
    o = _attend(qp, k_proj, v_proj, params.d_head, None, 0.0, None, False,
                mix_tag="moa.mix", score_tag="moa.scores")
    out = ad.matmul(o, params.w_out[expert_index], tag="moa.out_proj")
    return ad.reshape(out, (params.d_model,))


def project_keys_values(k_seq: Tensor, v_seq: Tensor,
                        params: MoALayerParams) -> tuple[Tensor, Tensor]:
    """The shared projections, computed exactly once per layer call."""
    k_proj = ad.matmul(k_seq, params.w_key, tag="moa.k_proj")
    v_proj = ad.matmul(v_seq, params.w_value, tag="moa.v_proj")
    return k_proj, v_proj


def moa_forward(q_seq: Tensor, k_seq: Tensor, v_seq: Tensor,
                params: MoALayerParams, k: int, causal: bool = False, *,
                attn_dropout: float = 0.0, rng=None,
                train: bool = False) -> tuple[Tensor, RouterOutput]:
    """Routed attention over a token sequence.

    Routes every query, evaluates only the selected experts (tokens grouped
    per expert), and scatters the weight-combined outputs back into sequence
    order. Returns the router output alongside y for the auxiliary losses
    and load analysis.
    """
    n_tokens = q_seq.shape[0]
    k_proj, v_proj = project_keys_values(k_seq, v_seq, params)
    router_out = route(q_seq, params.router, k, tag="moa.router")
    mask = causal_mask(n_tokens, k_seq.shape[0]) if causal else None
    combined = None
    for expert in np.unique(router_out.indices):
        token_rows, slots = np.nonzero(router_out.indices == expert)
        q_e = ad.gather_rows(q_seq, token_rows)
        qp = ad.matmul(q_e, params.w_query[expert], tag="moa.q_proj")
        o = _attend(qp, k_proj, v_proj, params.d_head,
                    mask[token_rows] if mask is not None else None,
                    attn_dropout, rng, train,
                    mix_tag="moa.mix", score_tag="moa.scores")
        out_e = ad.matmul(o, params.w_out[expert], tag="moa.out_proj")
        w_col = ad.take_along(ad.gather_rows(router_out.weights, token_rows),
                              slots[:, None])
        contribution = ad.scatter_rows(ad.mul(w_col, out_e), token_rows, n_tokens)
        combined = contribution if combined is None else ad.add(combined, contribution)
    return combined, router_out
