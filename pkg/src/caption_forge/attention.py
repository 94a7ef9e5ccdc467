"""Context construction: none (global descriptor), dot, MLP, and multi-head.

Each mechanism turns encoder states V (rows = image locations) and a query
into a probability distribution over locations plus a context vector in the
convex hull of the rows. Multi-head attention is the general matrix form
shared by the transformer, the convolutional decoder, and the multi-head
variant of the recurrent decoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionError
from .tensor import (
    Tensor,
    add_rowvec,
    concat,
    matmul,
    reshape,
    scale,
    slice_axis,
    softmax,
    tanh,
    transpose,
)


@dataclass
class AttentionOutput:
    """Context vector plus the attention distribution(s) that built it.

    ``weights`` has one row per head ([heads, K]); single-weight mechanisms
    use one row. Rows are probability distributions over locations.
    """

    context: Tensor
    weights: np.ndarray

    def pooled_weights(self) -> np.ndarray:
        """Head-averaged distribution (what the attention-dump CLI reports)."""
        return self.weights.mean(axis=0)


@dataclass
class MLPAttentionParams:
    w_v: Tensor       # [a, d']
    w_h: Tensor       # [a, h_dim]
    w_score: Tensor   # [a]


@dataclass
class MultiHeadParams:
    """Fused per-head projections: columns [u*d_u, (u+1)*d_u) belong to head u."""

    w_q: Tensor    # [d_q, heads * d_u]
    w_k: Tensor    # [d_kv, heads * d_u]
    w_l: Tensor    # [d_kv, heads * d_u]
    w_out: Tensor  # [heads * d_u, d_model]
    heads: int

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[1] // self.heads


def attend_none(v_global: Tensor, location_count: int) -> AttentionOutput:
    """No attention: the global descriptor is the context for every query."""
    weights = np.full((1, location_count), 1.0 / location_count)
    return AttentionOutput(context=v_global, weights=weights)


def attend_dot(states: Tensor, query: Tensor,
               bridge: Optional[Tensor] = None) -> AttentionOutput:
    """Scores are plain dot products between each state row and the query.

    ``bridge`` is the learned projection applied when the query width does
    not match the state width.
    """
    q = query
    if bridge is not None:
        q = reshape(matmul(reshape(q, (1, q.shape[0])), bridge), (bridge.shape[1],))
    if q.shape[0] != states.shape[1]:
        raise DimensionError(
            f"dot attention: query width {q.shape[0]} vs states {states.shape}")
    scores = reshape(matmul(states, reshape(q, (q.shape[0], 1))), (states.shape[0],))
    alpha = softmax(scores, axis=0)
    context = reshape(matmul(reshape(alpha, (1, alpha.shape[0])), states),
                      (states.shape[1],))
    return AttentionOutput(context=context, weights=alpha.data[None, :].copy())


def attend_mlp(states: Tensor, query: Tensor,
               params: MLPAttentionParams) -> AttentionOutput:
    """score_k = w_score . tanh(W_v v_k + W_h h); softmax over k; blend rows."""
    k_count = states.shape[0]
    projected = matmul(states, transpose(params.w_v))            # [K, a]
    q = matmul(params.w_h, reshape(query, (query.shape[0], 1)))  # [a, 1]
    act = tanh(add_rowvec(projected, reshape(q, (q.shape[0],))))
    scores = reshape(matmul(act, reshape(params.w_score, (-1, 1))), (k_count,))
    alpha = softmax(scores, axis=0)
    context = reshape(matmul(reshape(alpha, (1, k_count)), states),
                      (states.shape[1],))
    return AttentionOutput(context=context, weights=alpha.data[None, :].copy())


def attend_multihead(queries: Tensor, keys: Tensor, values: Tensor,
                     params: MultiHeadParams,
                     mask: Optional[np.ndarray] = None,
                     weights_out: Optional[list] = None) -> Tensor:
    """Scaled dot-product attention with per-head projections.

    queries: [n_q, d_q]; keys/values: [n_k, d_kv]. Per head u the context is
    softmax(Q W_q_u (K W_k_u)^T / sqrt(d_u)) V W_l_u; heads are concatenated
    and linearly mixed by W_out. ``mask`` (True = allowed, [n_q, n_k]) makes
    forbidden positions contribute exactly zero weight. If ``weights_out`` is
    given, the per-head weight arrays [n_q, n_k] are appended to it.
    """
    if keys.shape[0] != values.shape[0]:
        raise DimensionError(f"keys {keys.shape} vs values {values.shape}")
    d_u = params.head_dim
    scale_factor = 1.0 / math.sqrt(d_u)
    contexts = []
    for u in range(params.heads):
        lo, hi = u * d_u, (u + 1) * d_u
        q = matmul(queries, slice_axis(params.w_q, 1, lo, hi))   # [n_q, d_u]
        k = matmul(keys, slice_axis(params.w_k, 1, lo, hi))      # [n_k, d_u]
        v = matmul(values, slice_axis(params.w_l, 1, lo, hi))    # [n_k, d_u]
        scores = scale(matmul(q, transpose(k)), scale_factor)
        alpha = softmax(scores, axis=1, mask=mask)
        if weights_out is not None:
            weights_out.append(alpha.data.copy())
        contexts.append(matmul(alpha, v))
    return matmul(concat(contexts, axis=1), params.w_out)


def attend_multihead_pooled(states: Tensor, query: Tensor,
                            params: MultiHeadParams,
                            bridge: Optional[Tensor] = None) -> AttentionOutput:
    """Single-query multi-head attention packaged like the other mechanisms."""
    q = query
    if bridge is not None:
        q = reshape(matmul(reshape(q, (1, q.shape[0])), bridge), (bridge.shape[1],))
    collected: list = []
    out = attend_multihead(reshape(q, (1, q.shape[0])), states, states, params,
                           weights_out=collected)
    context = reshape(out, (out.shape[1],))
    weights = np.stack([w[0] for w in collected], axis=0)
    return AttentionOutput(context=context, weights=weights)


def causal_mask(t_len: int) -> np.ndarray:
    """Boolean [t, t] mask allowing position i to read positions <= i."""
    return np.tril(np.ones((t_len, t_len), dtype=bool))
