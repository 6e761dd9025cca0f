"""Stage-2 decoder-only transformer over raster-ordered token grids.

Input layout for a grid of N = H*W tokens is N + 1 positions: a prefix
(class-id embedding for conditional models, a learned begin-of-sequence
vector otherwise) followed by the image tokens. Logits at position i predict
image token i, so the last position's logits are unused in training.
Image-token embeddings get a learned row vector plus a learned column vector
as their 2D position; the prefix gets none.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from . import nn
from . import tensor as T
from .errors import ConfigError, SamplingError
from .nn import Params
from .tensor import Tensor


@dataclass
class PriorConfig:
    blocks: int = 4
    heads: int = 4
    d_model: int = 64
    d_hidden: int = 256
    dropout: float = 0.1
    K: int = 256
    grid_h: int = 8
    grid_w: int = 8
    num_classes: int | None = None

    def validate(self) -> PriorConfig:
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.d_model % self.heads:
            raise ConfigError(f"heads {self.heads} do not divide d_model {self.d_model}")
        if self.K < 2 or self.K > 65536:
            raise ConfigError(f"vocabulary size {self.K} outside [2, 65536]")
        if self.blocks < 1 or self.grid_h < 1 or self.grid_w < 1:
            raise ConfigError("blocks and grid extents must be positive")
        if self.num_classes is not None and self.num_classes < 1:
            raise ConfigError("num_classes must be positive when set")
        return self

    @property
    def conditional(self) -> bool:
        return self.num_classes is not None

    @property
    def num_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def max_len(self) -> int:
        return self.num_tokens + 1


@dataclass
class TokenGrid:
    height: int
    width: int
    indices: np.ndarray
    class_label: int | None = None

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if self.indices.size != self.height * self.width:
            raise ConfigError(f"{self.indices.size} indices for a {self.height}x{self.width} grid")

    def validate(self, K: int) -> TokenGrid:
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= K):
            raise T.IndexRangeError(f"token id outside [0, {K})")
        return self

    def as_array(self) -> np.ndarray:
        return self.indices.reshape(self.height, self.width)


def stack_grids(grids: Sequence[TokenGrid]) -> tuple[np.ndarray, np.ndarray | None]:
    ids = np.stack([g.indices for g in grids])
    labels = [g.class_label for g in grids]
    if all(lbl is None for lbl in labels):
        return ids, None
    if any(lbl is None for lbl in labels):
        raise ConfigError("mixed labelled and unlabelled grids")
    return ids, np.asarray(labels, dtype=np.int64)


# -- parameters ---------------------------------------------------------------


def init_prior(config: PriorConfig, rng: np.random.Generator, dtype=np.float32) -> Params:
    config.validate()
    d = config.d_model
    p: Params = {
        "prior.tok": nn.param(rng.normal(0, 0.02, size=(config.K, d)), dtype),
        "prior.row": nn.param(rng.normal(0, 0.02, size=(config.grid_h, d)), dtype),
        "prior.col": nn.param(rng.normal(0, 0.02, size=(config.grid_w, d)), dtype),
    }
    if config.conditional:
        p["prior.cls"] = nn.param(rng.normal(0, 0.02, size=(config.num_classes, d)), dtype)
    else:
        p["prior.bos"] = nn.param(rng.normal(0, 0.02, size=(1, d)), dtype)
    for i in range(config.blocks):
        nn.init_block(p, f"prior.block{i}", d, config.d_hidden, rng, dtype)
    nn.init_layernorm(p, "prior.ln_f", d, dtype)
    p["prior.head.w"] = nn.param(np.zeros((d, config.K)), dtype)
    p["prior.head.b"] = nn.param(np.zeros(config.K), dtype)
    return p


# -- embedding ----------------------------------------------------------------------


def _check_labels(labels, config: PriorConfig, batch: int) -> np.ndarray | None:
    if labels is None:
        if config.conditional:
            raise ConfigError("conditional prior needs a class label")
        return None
    if not config.conditional:
        raise ConfigError("class label given to an unconditional prior")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != batch:
        raise T.ShapeError(f"{labels.shape[0]} labels for {batch} grids")
    if labels.min() < 0 or labels.max() >= config.num_classes:
        raise T.IndexRangeError(f"class label outside [0, {config.num_classes})")
    return labels


def _token_embeddings(ids: np.ndarray, params: Params, config: PriorConfig) -> Tensor:
    n = ids.shape[1]
    pos = np.arange(n)
    tok = T.embedding(params["prior.tok"], ids)
    row = T.embedding(params["prior.row"], pos // config.grid_w)
    col = T.embedding(params["prior.col"], pos % config.grid_w)
    return tok + (row + col)


def _prefix(labels: np.ndarray | None, params: Params, batch: int) -> Tensor:
    if labels is None:
        bos = params["prior.bos"]
        return bos.reshape(1, 1, bos.shape[-1]) + Tensor(np.zeros((batch, 1, bos.shape[-1]), dtype=bos.dtype))
    cls = T.embedding(params["prior.cls"], labels)
    return cls.reshape(batch, 1, cls.shape[-1])


def embed_sequence(grid: TokenGrid, params: Params, config: PriorConfig) -> Tensor:
    """[S, d_model] embedding of one grid: class token (if any) then image tokens."""
    grid.validate(config.K)
    if (grid.height, grid.width) != (config.grid_h, config.grid_w):
        raise T.ShapeError(f"grid {grid.height}x{grid.width} != configured {config.grid_h}x{config.grid_w}")
    labels = None if grid.class_label is None else [grid.class_label]
    labels = _check_labels(labels, config, 1)
    x = _token_embeddings(grid.indices[None, :], params, config)
    if labels is not None:
        x = T.concat([_prefix(labels, params, 1), x], axis=1)
    return x.reshape(x.shape[1], x.shape[2])


def model_inputs(ids, labels, params: Params, config: PriorConfig) -> Tensor:
    """[B, N+1, d_model] model input: prefix then image tokens."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None]
    ids = ids.reshape(ids.shape[0], -1)
    if ids.shape[1] > config.num_tokens:
        raise T.ShapeError(f"{ids.shape[1]} tokens exceed the {config.num_tokens}-token grid")
    labels = _check_labels(labels, config, ids.shape[0])
    prefix = _prefix(labels, params, ids.shape[0])
    if ids.shape[1] == 0:
        return prefix
    return T.concat([prefix, _token_embeddings(ids, params, config)], axis=1)


# -- transformer ------------------------------------------------------------------------


def forward_causal(
    seq: Tensor,
    params: Params,
    config: PriorConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    hidden: list | None = None,
) -> Tensor:
    """Logits [B, S, K] (or [S, K] for an unbatched input).

    Block outputs are appended to ``hidden`` when a list is passed.
    """
    single = seq.ndim == 2
    if single:
        seq = seq.reshape(1, *seq.shape)
    if seq.shape[1] > config.max_len:
        raise T.ShapeError(f"sequence length {seq.shape[1]} exceeds maximum {config.max_len}")
    h = seq
    for i in range(config.blocks):
        h = nn.block(params, f"prior.block{i}", h, config.heads, causal=True,
                     dropout=config.dropout, rng=rng, training=training)
        if hidden is not None:
            hidden.append(h)
    h = nn.layernorm(params, "prior.ln_f", h)
    logits = nn.linear(params, "prior.head", h)
    return logits.reshape(logits.shape[1], logits.shape[2]) if single else logits


def nll_batch(ids, labels, params: Params, config: PriorConfig, training: bool = False,
              rng: np.random.Generator | None = None) -> Tensor:
    """Teacher-forced mean NLL (nats/token) over all image tokens of the batch."""
    ids = np.asarray(ids, dtype=np.int64).reshape(len(ids), -1)
    if ids.shape[1] != config.num_tokens:
        raise T.ShapeError(f"expected {config.num_tokens} tokens per grid, got {ids.shape[1]}")
    if ids.min() < 0 or ids.max() >= config.K:
        raise ConfigError(f"token ids outside the vocabulary [0, {config.K})")
    logits = forward_causal(model_inputs(ids, labels, params, config), params, config, training, rng)
    b, n = ids.shape
    return T.cross_entropy(logits[:, :n].reshape(b * n, config.K), ids.reshape(-1))


def nll(grid: TokenGrid, params: Params, config: PriorConfig) -> float:
    labels = None if grid.class_label is None else [grid.class_label]
    with T.no_grad():
        return float(nll_batch(grid.indices[None], labels, params, config).data)


def per_grid_nll(ids, labels, params: Params, config: PriorConfig, batch_size: int = 64) -> np.ndarray:
    """Eval-mode NLL of each grid in nats/token."""
    ids = np.asarray(ids, dtype=np.int64).reshape(len(ids), -1)
    out = np.empty(len(ids))
    for s in range(0, len(ids), batch_size):
        chunk = ids[s:s + batch_size]
        lab = None if labels is None else np.asarray(labels)[s:s + batch_size]
        with T.no_grad():
            logits = forward_causal(model_inputs(chunk, lab, params, config), params, config).data
        z = logits[:, : chunk.shape[1]].astype(np.float64)
        z = z - z.max(-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
        picked = np.take_along_axis(logp, chunk[..., None], axis=-1)[..., 0]
        out[s:s + len(chunk)] = -picked.mean(axis=1)
    return out


# -- cached incremental decoding ------------------------------------------------------------


def _np_layernorm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    return xc / np.sqrt(var + eps) * g + b


def _np_gelu(x):
    return x * (0.5 * (1.0 + erf(x / math.sqrt(2.0))))


class IncrementalDecoder:
    """Eval-mode decoding one position at a time with cached keys and values."""

    def __init__(self, params: Params, config: PriorConfig, batch: int):
        self.p = {k: v.data for k, v in params.items()}
        self.config = config
        self.batch = batch
        dh = config.d_model // config.heads
        shape = (batch, config.heads, config.max_len, dh)
        dtype = self.p["prior.tok"].dtype
        self.keys = [np.zeros(shape, dtype) for _ in range(config.blocks)]
        self.values = [np.zeros(shape, dtype) for _ in range(config.blocks)]
        self.length = 0

    def step(self, x: np.ndarray) -> np.ndarray:
        """Feed embeddings [B, D] for the next position; return logits [B, K]."""
        cfg, p = self.config, self.p
        if self.length >= cfg.max_len:
            raise T.ShapeError("decoder cache is full")
        b, d, nh = self.batch, cfg.d_model, cfg.heads
        dh = d // nh
        t = self.length
        h = x.reshape(b, 1, d)
        for i in range(cfg.blocks):
            pre = f"prior.block{i}"
            a = _np_layernorm(h, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
            qkv = (a @ p[f"{pre}.attn.qkv.w"] + p[f"{pre}.attn.qkv.b"]).reshape(b, 1, 3, nh, dh)
            qkv = qkv.transpose(2, 0, 3, 1, 4)
            self.keys[i][:, :, t] = qkv[1][:, :, 0]
            self.values[i][:, :, t] = qkv[2][:, :, 0]
            k = self.keys[i][:, :, : t + 1]
            v = self.values[i][:, :, : t + 1]
            scores = (qkv[0] @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
            scores = scores - scores.max(-1, keepdims=True)
            w = np.exp(scores)
            w = w / w.sum(-1, keepdims=True)
            ctx = (w @ v).transpose(0, 2, 1, 3).reshape(b, 1, d)
            h = h + (ctx @ p[f"{pre}.attn.out.w"] + p[f"{pre}.attn.out.b"])
            a = _np_layernorm(h, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
            m = _np_gelu(a @ p[f"{pre}.mlp.fc.w"] + p[f"{pre}.mlp.fc.b"])
            h = h + (m @ p[f"{pre}.mlp.proj.w"] + p[f"{pre}.mlp.proj.b"])
        self.length += 1
        h = _np_layernorm(h, p["prior.ln_f.g"], p["prior.ln_f.b"])
        return (h @ p["prior.head.w"] + p["prior.head.b"])[:, 0]

    def prefix_embedding(self, labels: np.ndarray | None) -> np.ndarray:
        if labels is None:
            return np.repeat(self.p["prior.bos"], self.batch, axis=0)
        return self.p["prior.cls"][labels]

    def token_embedding(self, tokens: np.ndarray, position: int) -> np.ndarray:
        w = self.config.grid_w
        p = self.p
        return p["prior.tok"][tokens] + (p["prior.row"][position // w] + p["prior.col"][position % w])


def cached_logits(ids, labels, params: Params, config: PriorConfig) -> np.ndarray:
    """Teacher-forced logits [B, N, K] computed through the KV cache."""
    ids = np.asarray(ids, dtype=np.int64).reshape(len(ids), -1)
    labels = _check_labels(labels, config, len(ids))
    dec = IncrementalDecoder(params, config, len(ids))
    x = dec.prefix_embedding(labels)
    out = []
    for t in range(ids.shape[1]):
        out.append(dec.step(x))
        x = dec.token_embedding(ids[:, t], t)
    return np.stack(out, axis=1)


def _draw(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> np.ndarray:
    z = logits.astype(np.float64) / temperature
    z -= z.max(axis=1, keepdims=True)
    p = np.exp(z)
    cdf = np.cumsum(p / p.sum(axis=1, keepdims=True), axis=1)
    u = rng.random(len(logits))
    return np.minimum((cdf < u[:, None]).sum(axis=1), logits.shape[1] - 1)


def sample(
    params: Params,
    config: PriorConfig,
    count: int,
    class_label: int | None = None,
    temperature: float = 1.0,
    seed: int = 0,
) -> list[TokenGrid]:
    """Ancestral sampling of ``count`` grids from softmax(logits / temperature)."""
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    labels = None if class_label is None else np.full(count, class_label, dtype=np.int64)
    labels = _check_labels(labels, config, count)
    rng = np.random.default_rng(seed)
    dec = IncrementalDecoder(params, config, count)
    x = dec.prefix_embedding(labels)
    out = np.zeros((count, config.num_tokens), dtype=np.int64)
    for t in range(config.num_tokens):
        tok = _draw(dec.step(x), temperature, rng)
        out[:, t] = tok
        x = dec.token_embedding(tok, t)
    return [TokenGrid(config.grid_h, config.grid_w, row, class_label) for row in out]


def rejection_sample(
    params: Params,
    config: PriorConfig,
    class_label: int | None,
    acceptance_rate: float,
    scorer: Callable[[list[TokenGrid]], Sequence[float]],
    count: int,
    seed: int = 0,
    temperature: float = 1.0,
) -> list[TokenGrid]:
    """Draw ceil(count / r) grids and keep the ``count`` the scorer rates highest.

    ``scorer`` receives the candidate grids and returns one target-class score
    per grid. Survivors keep their draw order.
    """
    if not 0.0 < acceptance_rate <= 1.0:
        raise ConfigError(f"acceptance rate must lie in (0, 1], got {acceptance_rate}")
    total = math.ceil(count / acceptance_rate - 1e-9)
    grids = sample(params, config, total, class_label, temperature, seed)
    try:
        scores = np.asarray(scorer(grids), dtype=np.float64)
    except Exception as exc:
        raise SamplingError(f"scorer failed: {exc}") from exc
    if scores.shape != (total,):
        raise SamplingError(f"scorer returned shape {scores.shape}, expected ({total},)")
    keep = np.sort(np.argsort(-scores, kind="stable")[:count])
    return [grids[i] for i in keep]


# -- frozen features ---------------------------------------------------------------------------


def block_outputs(ids, labels, params: Params, config: PriorConfig) -> list[np.ndarray]:
    """Eval-mode outputs of every block, each [B, N+1, D]."""
    hidden: list[Tensor] = []
    with T.no_grad():
        forward_causal(model_inputs(ids, labels, params, config), params, config, hidden=hidden)
    return [h.data for h in hidden]


def extract_features(ids, labels, params: Params, config: PriorConfig, block_index: int,
                     batch_size: int = 64) -> np.ndarray:
    """Mean over image-token positions of block ``block_index``'s output, shape [B, D]."""
    if not 0 <= block_index < config.blocks:
        raise ConfigError(f"block index {block_index} outside [0, {config.blocks})")
    return extract_all_features(ids, labels, params, config, batch_size)[block_index]


def extract_all_features(ids, labels, params: Params, config: PriorConfig, batch_size: int = 64) -> np.ndarray:
    """Sequence-averaged features for every block, shape [blocks, B, D]."""
    ids = np.asarray(ids, dtype=np.int64).reshape(len(ids), -1)
    feats = np.empty((config.blocks, len(ids), config.d_model))
    for s in range(0, len(ids), batch_size):
        lab = None if labels is None else np.asarray(labels)[s:s + batch_size]
        outs = block_outputs(ids[s:s + batch_size], lab, params, config)
        for i, h in enumerate(outs):
            feats[i, s:s + len(h)] = h[:, 1:].mean(axis=1)
    return feats
