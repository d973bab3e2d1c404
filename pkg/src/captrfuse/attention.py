"""Key/query/value attention, multi-head blocks and transformer layers.

Sequences are stored column-wise: a stream of ``N`` vectors of width ``d`` is
a ``d x N`` tensor, so projections are left multiplications ``W @ X``.
Positional encodings are added to query and key inputs of every attention
block; values never see them.
"""

import math

import numpy as np

from . import tensor as T
from .nn import Module, ones, uniform, zeros
from .tensor import ShapeError, Tensor, get_dtype


class AttentionHeadParams(Module):
    """One head: ``weight`` stacks the query, key and value maps (3 x d' x d)."""

    def __init__(self, d_model, d_head, rng):
        self.weight = uniform(rng, (3, d_head, d_model), d_model)

    @property
    def d_head(self):
        return self.weight.shape[1]


class AttentionBlock(Module):
    """M heads, output map ``L`` (d x d), residual layer norm."""

    def __init__(self, d_model, num_heads, rng, dropout=0.1):
        if d_model % num_heads:
            raise ValueError(f"model width {d_model} not divisible by {num_heads} heads")
        d_head = d_model // num_heads
        self.heads = [AttentionHeadParams(d_model, d_head, rng) for _ in range(num_heads)]
        self.out_proj = uniform(rng, (d_model, d_model), d_model)
        self.norm_gamma = ones((d_model,))
        self.norm_beta = zeros((d_model,))
        self._dropout = dropout

    @property
    def d_model(self):
        return self.out_proj.shape[0]


class FeedForward(Module):
    def __init__(self, d_model, d_ff, rng, dropout=0.1):
        self.w1 = uniform(rng, (d_ff, d_model), d_model)
        self.b1 = zeros((d_ff, 1))
        self.w2 = uniform(rng, (d_model, d_ff), d_ff)
        self.b2 = zeros((d_model, 1))
        self.norm_gamma = ones((d_model,))
        self.norm_beta = zeros((d_model,))
        self._dropout = dropout


class EncoderLayerParams(Module):
    def __init__(self, d_model, num_heads, rng, d_ff=None, dropout=0.1):
        self.attn = AttentionBlock(d_model, num_heads, rng, dropout)
        self.ffn = FeedForward(d_model, d_ff or 4 * d_model, rng, dropout)


class DecoderLayerParams(Module):
    def __init__(self, d_model, num_heads, rng, d_ff=None, dropout=0.1):
        self.self_attn = AttentionBlock(d_model, num_heads, rng, dropout)
        self.cross_attn = AttentionBlock(d_model, num_heads, rng, dropout)
        self.ffn = FeedForward(d_model, d_ff or 4 * d_model, rng, dropout)


def _with_positions(x, pos):
    if pos is None:
        return x
    if pos.shape != x.shape:
        raise ShapeError(f"positional encoding {pos.shape} does not match stream {x.shape}")
    return T.add(x, pos)


def qkv_project(x_q, x_kv, p_q, p_kv, head):
    """Q = T1 (X_q + P_q), K = T2 (X_kv + P_kv), V = T3 X_kv. ``None`` positions mean zero."""
    d = head.weight.shape[2]
    if x_q.shape[0] != d or x_kv.shape[0] != d:
        raise ShapeError(f"streams {x_q.shape}, {x_kv.shape} do not have width {d}")
    w = head.weight
    q = T.matmul(w[0], _with_positions(x_q, p_q))
    k = T.matmul(w[1], _with_positions(x_kv, p_kv))
    v = T.matmul(w[2], x_kv)
    return q, k, v


def attention_weights(q, k, key_bias=None):
    """alpha[i, j] = softmax_j(Q_i . K_j / sqrt(d')); ``key_bias`` (1 x N_kv) masks keys."""
    if q.shape[0] != k.shape[0]:
        raise ShapeError(f"query width {q.shape[0]} != key width {k.shape[0]}")
    scores = T.scale(T.matmul(T.transpose(q), k), 1.0 / math.sqrt(q.shape[0]))
    if key_bias is not None:
        scores = T.add(scores, key_bias)
    return T.softmax(scores, axis=1)


def attention_apply(alpha, v):
    """Column i of the result is sum_j alpha[i, j] V_j."""
    if alpha.shape[1] != v.shape[1]:
        raise ShapeError(f"weights {alpha.shape} do not match {v.shape[1]} values")
    return T.matmul(v, T.transpose(alpha))


def multi_head(x_q, x_kv, block, p_q=None, p_kv=None, key_bias=None, training=False, rng=None):
    """layernorm(X_q + dropout(L [head_1; ...; head_M]))."""
    outs = []
    for head in block.heads:
        q, k, v = qkv_project(x_q, x_kv, p_q, p_kv, head)
        outs.append(attention_apply(attention_weights(q, k, key_bias), v))
    merged = outs[0] if len(outs) == 1 else T.concat(outs, axis=0)
    proj = T.dropout(T.matmul(block.out_proj, merged), block._dropout, training, rng)
    return T.layer_norm(T.add(x_q, proj), block.norm_gamma, block.norm_beta, axis=0)


def feed_forward(x, ffn, training=False, rng=None):
    h = T.relu(T.add(T.matmul(ffn.w1, x), ffn.b1))
    out = T.dropout(T.add(T.matmul(ffn.w2, h), ffn.b2), ffn._dropout, training, rng)
    return T.layer_norm(T.add(x, out), ffn.norm_gamma, ffn.norm_beta, axis=0)


def encoder_layer_forward(x, pos, layer, key_bias=None, training=False, rng=None):
    x = multi_head(x, x, layer.attn, pos, pos, key_bias, training, rng)
    return feed_forward(x, layer.ffn, training, rng)


def decoder_layer_forward(x_dec, memory, p_dec, p_mem, layer, training=False, rng=None):
    """Self-attention, then cross-attention into ``memory``, then feed-forward.

    No causal mask: every output position sees every other one.
    """
    if memory.shape[0] != x_dec.shape[0]:
        raise ShapeError(f"memory width {memory.shape[0]} != decoder width {x_dec.shape[0]}")
    x = multi_head(x_dec, x_dec, layer.self_attn, p_dec, p_dec, None, training, rng)
    x = multi_head(x, memory, layer.cross_attn, p_dec, p_mem, None, training, rng)
    return feed_forward(x, layer.ffn, training, rng)


def _sinusoid_table(d, n):
    pos = np.arange(n)[:, None]
    freq = np.power(10000.0, -np.arange(0, d, 2) / d)
    table = np.zeros((d, n))
    table[0::2] = np.sin(pos * freq).T
    table[1::2] = np.cos(pos * freq).T
    return table


def sinusoidal_positions(d, size):
    """Fixed sin/cos encoding, returned as a ``d x N`` constant tensor.

    ``size`` is a length for token streams or ``(h, w)`` for image grids; the
    grid variant spends d/2 rows on the row index and d/2 on the column index,
    flattened row-major to match the memory layout.
    """
    if isinstance(size, tuple):
        h, w = size
        if d % 4:
            raise ValueError(f"2-d positional encoding needs d divisible by 4, got {d}")
        rows = _sinusoid_table(d // 2, h)
        cols = _sinusoid_table(d // 2, w)
        table = np.concatenate(
            [np.repeat(rows, w, axis=1), np.tile(cols, (1, h))], axis=0
        )
    else:
        if d % 2:
            raise ValueError(f"positional encoding needs an even width, got {d}")
        table = _sinusoid_table(d, int(size))
    return Tensor(table, dtype=get_dtype())
