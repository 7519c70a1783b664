"""Neural building blocks: the three attention functions, the position-wise
feed-forward sublayer, the GRU cell, embeddings and the sinusoidal position
signal.

Everything here is a pure function over parameter containers; row-vector
convention throughout (activations are ``[positions x features]`` and weights
multiply on the right).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

MASKED_SCORE = -1e9


@dataclass
class MultiHeadParams:
    """Projections for multi-head attention.

    ``w_q`` maps the query side (which may have a different width than the
    key/value side, e.g. a GRU state attending over encoder output) into
    model space; heads are contiguous column blocks of width d_h.
    """

    w_q: Tensor  # (query_dim, model_dim)
    w_k: Tensor  # (kv_dim, model_dim)
    w_v: Tensor  # (kv_dim, model_dim)
    w_o: Tensor  # (model_dim, model_dim)
    heads: int

    @property
    def model_dim(self) -> int:
        return self.w_o.shape[0]


@dataclass
class AdditiveAttnParams:
    w_a: Tensor  # (decoder_dim, attn_dim)
    u_a: Tensor  # (encoder_dim, attn_dim)
    v_a: Tensor  # (attn_dim,)


@dataclass
class FFNParams:
    w1: Tensor  # (model_dim, filter_dim)
    b1: Tensor  # (filter_dim,)
    w2: Tensor  # (filter_dim, model_dim)
    b2: Tensor  # (model_dim,)


@dataclass
class GRUParams:
    """Update (z), reset (r) and candidate (h) gates; ``w_*`` act on the
    input, ``u_*`` on the previous hidden state."""

    w_z: Tensor
    w_r: Tensor
    w_h: Tensor
    u_z: Tensor
    u_r: Tensor
    u_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    @property
    def hidden_dim(self) -> int:
        return self.u_z.shape[0]


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d)) v.

    ``mask`` is a boolean [Lq x Lk] array, True where attention is allowed;
    disallowed scores are replaced with MASKED_SCORE so their weight
    underflows to exactly zero.
    """
    if q.shape[-1] != k.shape[-1] or k.shape != v.shape:
        raise ShapeError(f"attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    d = q.shape[-1]
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise ValueError("attention mask leaves a query row with no allowed key")
        scores = ad.masked_fill(scores, mask, MASKED_SCORE)
    weights = ad.softmax(scores, axis=-1)
    return ad.matmul(weights, v), weights


def _heads_attend(q: Tensor, k: Tensor, v: Tensor, heads: int,
                  mask: np.ndarray | None) -> Tensor:
    """Per-head scaled-dot attention over contiguous column slices, re-concatenated."""
    model_dim = q.shape[-1]
    if model_dim % heads:
        raise ShapeError(f"model dim {model_dim} not divisible by {heads} heads")
    d_h = model_dim // heads
    outs = []
    for h in range(heads):
        lo, hi = h * d_h, (h + 1) * d_h
        ctx, _ = scaled_dot_attention(ad.narrow(q, 1, lo, hi),
                                      ad.narrow(k, 1, lo, hi),
                                      ad.narrow(v, 1, lo, hi), mask)
        outs.append(ctx)
    return outs[0] if heads == 1 else ad.concat(outs, axis=1)


def project_kv(p: MultiHeadParams, keys_values: Tensor) -> tuple[Tensor, Tensor]:
    """The once-per-sentence K/V projection that the cached path reuses."""
    return ad.matmul(keys_values, p.w_k), ad.matmul(keys_values, p.w_v)


def multi_head_attention(p: MultiHeadParams, query: Tensor, keys_values: Tensor,
                         mask: np.ndarray | None = None) -> Tensor:
    """Project, split into heads, attend, concat, project back."""
    q = ad.matmul(query, p.w_q)
    k, v = project_kv(p, keys_values)
    return ad.matmul(_heads_attend(q, k, v, p.heads, mask), p.w_o)


def multi_head_attention_cached(p: MultiHeadParams, query: Tensor,
                                pre_k: Tensor, pre_v: Tensor,
                                mask: np.ndarray | None = None) -> Tensor:
    """Same math as ``multi_head_attention`` minus the K/V projections."""
    q = ad.matmul(query, p.w_q)
    return ad.matmul(_heads_attend(q, pre_k, pre_v, p.heads, mask), p.w_o)


def multi_head_self_attention(p: MultiHeadParams, x: Tensor,
                              mask: np.ndarray | None = None,
                              fused: bool = False) -> Tensor:
    """Self-attention variant; ``fused`` computes Q,K,V in one matmul
    against the column-concatenated projection matrices."""
    if fused:
        d = p.model_dim
        qkv = ad.matmul(x, ad.concat([p.w_q, p.w_k, p.w_v], axis=1))
        q = ad.narrow(qkv, 1, 0, d)
        k = ad.narrow(qkv, 1, d, 2 * d)
        v = ad.narrow(qkv, 1, 2 * d, 3 * d)
        return ad.matmul(_heads_attend(q, k, v, p.heads, mask), p.w_o)
    return multi_head_attention(p, x, x, mask)


def additive_attention(p: AdditiveAttnParams, dec_state: Tensor,
                       enc_states: Tensor) -> tuple[Tensor, Tensor]:
    """Scores v_a . tanh(W_a s + U_a h_i), softmax, weighted sum of encoder rows."""
    if enc_states.shape[0] == 0:
        raise ValueError("additive_attention: no encoder states")
    return additive_attention_pre(p, dec_state, ad.matmul(enc_states, p.u_a), enc_states)


def additive_attention_pre(p: AdditiveAttnParams, dec_state: Tensor,
                           u_enc: Tensor, enc_states: Tensor) -> tuple[Tensor, Tensor]:
    """Additive attention from a precomputed ``U_a @ enc`` table (the
    per-sentence precompute used at decode time)."""
    if u_enc.shape[0] == 0:
        raise ValueError("additive_attention: no encoder states")
    query = ad.matmul(dec_state, p.w_a)  # (attn_dim,)
    scores = ad.matmul(ad.tanh(ad.add(u_enc, query)), p.v_a)  # (L,)
    weights = ad.softmax(scores, axis=-1)
    return ad.matmul(weights, enc_states), weights


def dot_attention(dec_state: Tensor, enc_states: Tensor,
                  bridge: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Dot-product attention, with an optional learned bridge projecting the
    decoder state into encoder space when the dims differ."""
    if enc_states.shape[0] == 0:
        raise ValueError("dot_attention: no encoder states")
    query = dec_state if bridge is None else ad.matmul(dec_state, bridge)
    d = enc_states.shape[-1]
    if query.shape[-1] != d:
        raise ShapeError(f"dot_attention: state dim {query.shape[-1]} vs encoder dim {d} "
                         "(configure a bridge)")
    scores = ad.scale(ad.matmul(enc_states, query), 1.0 / math.sqrt(d))
    weights = ad.softmax(scores, axis=-1)
    return ad.matmul(weights, enc_states), weights


def ffn(p: FFNParams, x: Tensor) -> Tensor:
    """Position-wise two-layer transform with a ReLU in between."""
    hidden = ad.relu(ad.add(ad.matmul(x, p.w1), p.b1))
    return ad.add(ad.matmul(hidden, p.w2), p.b2)


def gru_cell(p: GRUParams, x: Tensor, h_prev: Tensor, fused: bool = False) -> Tensor:
    """One GRU step: h = (1 - z) * h_prev + z * h_tilde, with the reset gate
    applied to the recurrent term of the candidate."""
    if fused:
        fused_w, fused_u = fuse_gru(p)
        return gru_cell_fused(p, fused_w, fused_u, x, h_prev)
    z = ad.sigmoid(ad.add(ad.add(ad.matmul(x, p.w_z), ad.matmul(h_prev, p.u_z)), p.b_z))
    r = ad.sigmoid(ad.add(ad.add(ad.matmul(x, p.w_r), ad.matmul(h_prev, p.u_r)), p.b_r))
    cand = ad.tanh(ad.add(ad.add(ad.matmul(x, p.w_h), p.b_h),
                          ad.mul(r, ad.matmul(h_prev, p.u_h))))
    return _gate_blend(z, h_prev, cand)


def fuse_gru(p: GRUParams) -> tuple[Tensor, Tensor]:
    """Column-concatenated gate transforms so one matmul serves all three gates."""
    return ad.concat([p.w_z, p.w_r, p.w_h], axis=1), ad.concat([p.u_z, p.u_r, p.u_h], axis=1)


def gru_cell_fused(p: GRUParams, fused_w: Tensor, fused_u: Tensor,
                   x: Tensor, h_prev: Tensor) -> Tensor:
    """GRU step from pre-fused gate matrices (decode-time weight combination)."""
    n = p.hidden_dim
    xw = ad.matmul(x, fused_w)
    hu = ad.matmul(h_prev, fused_u)
    z = ad.sigmoid(ad.add(ad.add(ad.narrow(xw, 0, 0, n), ad.narrow(hu, 0, 0, n)), p.b_z))
    r = ad.sigmoid(ad.add(ad.add(ad.narrow(xw, 0, n, 2 * n), ad.narrow(hu, 0, n, 2 * n)), p.b_r))
    cand = ad.tanh(ad.add(ad.add(ad.narrow(xw, 0, 2 * n, 3 * n), p.b_h),
                          ad.mul(r, ad.narrow(hu, 0, 2 * n, 3 * n))))
    return _gate_blend(z, h_prev, cand)


def _gate_blend(z: Tensor, h_prev: Tensor, cand: Tensor) -> Tensor:
    one_minus_z = ad.add(ad.neg(z), Tensor(np.ones_like(z.data)))
    return ad.add(ad.mul(one_minus_z, h_prev), ad.mul(z, cand))


def positional_signal(length: int, d_model: int) -> Tensor:
    """Fixed sinusoidal position table; row 0 is [0, 1, 0, 1, ...] and any
    shorter table is a prefix of a longer one."""
    if length <= 0 or d_model <= 0:
        raise ShapeError("positional_signal: length and d_model must be positive")
    return Tensor(_positional_rows(np.arange(length), d_model))


def positional_row(position: int, d_model: int) -> Tensor:
    """Single row of the position table (incremental decoding)."""
    return Tensor(_positional_rows(np.array([position]), d_model)[0])


def _positional_rows(positions: np.ndarray, d_model: int) -> np.ndarray:
    half = (d_model + 1) // 2
    freqs = np.exp(-math.log(10000.0) * (2.0 * np.arange(half) / d_model))
    angles = positions[:, None] * freqs[None, :]
    table = np.zeros((len(positions), d_model))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : d_model // 2])
    return table


def embed(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Row gather from an embedding table; gradients scatter back into rows."""
    return ad.gather_rows(table, ids)


def causal_mask(length: int) -> np.ndarray:
    """Allowed[i, j] iff j <= i."""
    return np.tril(np.ones((length, length), dtype=bool))


def attend_single_query(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                        heads: int) -> np.ndarray:
    """Decode fast path: scaled-dot attention of one query row, all heads
    vectorized in plain numpy (no tape participation; the taped per-head ops
    remain the reference the equivalence tests check this against)."""
    t, d = k.shape
    d_h = d // heads
    qh = q.reshape(heads, d_h)
    scores = np.einsum("thd,hd->th", k.reshape(t, heads, d_h), qh) / math.sqrt(d_h)
    scores -= scores.max(axis=0)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=0)
    return np.einsum("th,thd->hd", scores, v.reshape(t, heads, d_h)).reshape(d)


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    y = 1.0 / (1.0 + np.exp(-np.abs(x)))
    return np.where(x >= 0, y, 1.0 - y)
