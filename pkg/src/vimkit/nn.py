"""Transformer building blocks shared by the codec and the prior.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names
(``"enc.block0.attn.qkv.w"``), which is also the checkpoint layout.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

Params = dict[str, Tensor]

MASK_VALUE = -1e9


def param(data: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def init_linear(params: Params, name: str, d_in: int, d_out: int, rng, dtype, std: float = 0.02, bias: bool = True):
    params[f"{name}.w"] = param(rng.normal(0.0, std, size=(d_in, d_out)), dtype)
    if bias:
        params[f"{name}.b"] = param(np.zeros(d_out), dtype)


def init_layernorm(params: Params, name: str, d: int, dtype):
    params[f"{name}.g"] = param(np.ones(d), dtype)
    params[f"{name}.b"] = param(np.zeros(d), dtype)


def linear(params: Params, name: str, x: Tensor) -> Tensor:
    y = T.matmul(x, params[f"{name}.w"])
    b = params.get(f"{name}.b")
    return y if b is None else y + b


def layernorm(params: Params, name: str, x: Tensor) -> Tensor:
    return T.layernorm(x, params[f"{name}.g"], params[f"{name}.b"], eps=1e-5)


def init_block(params: Params, name: str, d_model: int, d_hidden: int, rng, dtype):
    init_layernorm(params, f"{name}.ln1", d_model, dtype)
    init_linear(params, f"{name}.attn.qkv", d_model, 3 * d_model, rng, dtype)
    init_linear(params, f"{name}.attn.out", d_model, d_model, rng, dtype)
    init_layernorm(params, f"{name}.ln2", d_model, dtype)
    init_linear(params, f"{name}.mlp.fc", d_model, d_hidden, rng, dtype)
    init_linear(params, f"{name}.mlp.proj", d_hidden, d_model, rng, dtype)


def attention(
    params: Params,
    name: str,
    x: Tensor,
    heads: int,
    causal: bool,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """Multi-head self-attention over x of shape [B, S, D]."""
    b, s, d = x.shape
    dh = d // heads
    qkv = linear(params, f"{name}.qkv", x).reshape(b, s, 3, heads, dh)
    qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # [3, B, H, S, dh]
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    if causal:
        scores = T.masked_fill(scores, causal_mask(s), MASK_VALUE)
    weights = T.softmax(scores, axis=-1)
    weights = T.dropout(weights, dropout, rng, training)
    ctx = T.matmul(weights, v)  # [B, H, S, dh]
    ctx = T.transpose(ctx, (0, 2, 1, 3)).reshape(b, s, d)
    return linear(params, f"{name}.out", ctx)


def causal_mask(s: int) -> np.ndarray:
    """True above the diagonal: position i may not attend to j > i."""
    return np.triu(np.ones((s, s), dtype=bool), k=1)


def block(
    params: Params,
    name: str,
    x: Tensor,
    heads: int,
    causal: bool = False,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x))."""
    h = attention(params, f"{name}.attn", layernorm(params, f"{name}.ln1", x), heads, causal, dropout, rng, training)
    x = x + T.dropout(h, dropout, rng, training)
    h = T.gelu(linear(params, f"{name}.mlp.fc", layernorm(params, f"{name}.ln2", x)))
    h = T.dropout(h, dropout, rng, training)
    h = linear(params, f"{name}.mlp.proj", h)
    return x + T.dropout(h, dropout, rng, training)


def count_params(params: Params) -> int:
    return int(sum(p.size for p in params.values()))


def cast_params(params: Params, dtype) -> Params:
    return {k: param(v.data, dtype) for k, v in params.items()}


def zero_grads(params: Params) -> None:
    for p in params.values():
        p.grad = None
