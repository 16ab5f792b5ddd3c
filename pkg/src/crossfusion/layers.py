"""Reusable neural building blocks: linear, multi-head attention, transformer block.

All parameter containers are plain dataclasses of Tensors. ``named_params``
walks any such container depth-first in field order, which also defines the
serialization order of checkpoints.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass
class LinearParams:
    weight: Tensor  # [d_out, d_in]
    bias: Tensor | None  # [d_out]; attention q/k/v projections are bias-free


@dataclass
class LayerNormParams:
    gamma: Tensor  # [d]
    beta: Tensor  # [d]


@dataclass
class AttentionParams:
    q_proj: LinearParams
    k_proj: LinearParams
    v_proj: LinearParams
    out_proj: LinearParams
    n_heads: int


@dataclass
class FeedForwardParams:
    lin1: LinearParams  # [d*mult, d]
    lin2: LinearParams  # [d, d*mult]


@dataclass
class TransformerBlockParams:
    norm1: LayerNormParams
    norm2: LayerNormParams
    attn: AttentionParams
    ffn: FeedForwardParams
    dropout_rate: float


def named_params(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield (dotted name, tensor) pairs in declaration order, skipping None fields."""
    if isinstance(obj, Tensor):
        yield prefix, obj
        return
    if dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if value is None or isinstance(value, (int, float, str, bool)):
                continue
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_params(value, name)
        return
    raise TypeError(f"cannot walk parameters of {type(obj).__name__}")


def init_linear(rng: np.random.Generator, d_out: int, d_in: int, bias: bool = True) -> LinearParams:
    """Glorot-uniform weight, zero bias (or no bias at all)."""
    bound = np.sqrt(6.0 / (d_in + d_out))
    w = rng.uniform(-bound, bound, size=(d_out, d_in))
    return LinearParams(
        weight=Tensor(w, requires_grad=True),
        bias=Tensor(np.zeros(d_out), requires_grad=True) if bias else None,
    )


def init_layer_norm(d: int) -> LayerNormParams:
    return LayerNormParams(
        gamma=Tensor(np.ones(d), requires_grad=True),
        beta=Tensor(np.zeros(d), requires_grad=True),
    )


def init_attention(rng: np.random.Generator, d: int, n_heads: int) -> AttentionParams:
    """Query/key/value projections are plain weight matrices; only the output
    projection carries a bias (a key bias would cancel in the softmax)."""
    if d % n_heads != 0:
        raise ConfigError(f"embedding width {d} not divisible by {n_heads} heads")
    return AttentionParams(
        q_proj=init_linear(rng, d, d, bias=False),
        k_proj=init_linear(rng, d, d, bias=False),
        v_proj=init_linear(rng, d, d, bias=False),
        out_proj=init_linear(rng, d, d),
        n_heads=n_heads,
    )


def init_feed_forward(rng: np.random.Generator, d: int, mult: int) -> FeedForwardParams:
    return FeedForwardParams(
        lin1=init_linear(rng, d * mult, d),
        lin2=init_linear(rng, d, d * mult),
    )


def init_transformer_block(
    rng: np.random.Generator, d: int, n_heads: int, ffn_mult: int, dropout: float
) -> TransformerBlockParams:
    return TransformerBlockParams(
        norm1=init_layer_norm(d),
        norm2=init_layer_norm(d),
        attn=init_attention(rng, d, n_heads),
        ffn=init_feed_forward(rng, d, ffn_mult),
        dropout_rate=dropout,
    )


def linear(p: LinearParams, x: Tensor) -> Tensor:
    """x[.., d_in] -> x @ weight^T + bias."""
    return T.linear_op(x, p.weight, p.bias)


def multi_head_attention(
    p: AttentionParams,
    q_in: Tensor,
    kv_in: Tensor,
    return_weights: bool = False,
) -> tuple[Tensor, Tensor | None]:
    """Scaled dot-product attention over [N, d] queries and [M, d] context.

    Logits are scaled by 1/sqrt(d/heads). Returns the projected output [N, d]
    and, when asked, the detached per-head attention weights [heads, N, M].
    """
    d = p.q_proj.weight.shape[1]
    if q_in.shape[-1] != d or kv_in.shape[-1] != d:
        raise DimensionError(
            f"attention: widths {q_in.shape[-1]}/{kv_in.shape[-1]} != expected {d}"
        )
    q = linear(p.q_proj, q_in)
    k = linear(p.k_proj, kv_in)
    v = linear(p.v_proj, kv_in)
    merged, weights = T.mha_core(q, k, v, p.n_heads)
    out = linear(p.out_proj, merged)
    return out, (Tensor(weights) if return_weights else None)


def feed_forward(p: FeedForwardParams, x: Tensor) -> Tensor:
    return linear(p.lin2, T.gelu(linear(p.lin1, x)))


def transformer_block(
    p: TransformerBlockParams,
    x: Tensor,
    dropout_rng=None,
    return_weights: bool = False,
) -> tuple[Tensor, Tensor | None]:
    """Pre-norm block: x + MHSA(LN(x)), then x1 + Dropout(FFN(LN(x1))).

    Dropout fires only when a mask generator is supplied (training mode).
    """
    normed = T.layer_norm(x, p.norm1.gamma, p.norm1.beta)
    attn_out, weights = multi_head_attention(p.attn, normed, normed, return_weights)
    x1 = x + attn_out
    ffn_out = feed_forward(p.ffn, T.layer_norm(x1, p.norm2.gamma, p.norm2.beta))
    if dropout_rng is not None and p.dropout_rate > 0.0:
        mask = dropout_rng.keep_mask(ffn_out.shape, p.dropout_rate)
        ffn_out = T.dropout(ffn_out, p.dropout_rate, mask)
    out = x1 + ffn_out
    return out, weights
