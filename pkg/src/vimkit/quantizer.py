"""Vector-quantization bottleneck.

Lookup happens in a low-dimensional space reached through a learned linear
projection of the encoder output (factorized codes). Matched codes are mapped
back to the encoder width by a second linear map. With ``l2_normalized`` both
the projected features and the code rows are unit-normalized before matching,
so squared distance equals ``2 - 2 cos``.

The codebook/commitment loss is averaged over quantized positions::

    vq = mean_n ||sg(z_n) - e_n||^2 + beta * mean_n ||z_n - sg(e_n)||^2
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import Params, param
from .tensor import Tensor


@dataclass
class QuantizerConfig:
    K: int = 256
    d_model: int = 32
    d_lookup: int = 8
    beta: float = 0.25
    l2_normalized: bool = True
    factorized: bool = True

    def validate(self) -> QuantizerConfig:
        if self.K < 2:
            raise ConfigError(f"codebook size K must be >= 2, got {self.K}")
        if self.d_lookup < 1:
            raise ConfigError(f"d_lookup must be >= 1, got {self.d_lookup}")
        if not self.beta > 0:
            raise ConfigError(f"commitment weight beta must be > 0, got {self.beta}")
        if self.factorized and self.d_lookup > self.d_model:
            raise ConfigError(f"factorized lookup dim {self.d_lookup} exceeds d_model {self.d_model}")
        if not self.factorized and self.d_lookup != self.d_model:
            raise ConfigError("unfactorized quantizer needs d_lookup == d_model")
        return self

    @classmethod
    def vanilla(cls, K: int, d_model: int, beta: float = 0.25) -> QuantizerConfig:
        return cls(K=K, d_model=d_model, d_lookup=d_model, beta=beta, l2_normalized=False, factorized=False)


@dataclass
class Codebook:
    """Code rows plus a hit counter over the current usage window."""

    codes: Tensor
    l2_normalized: bool = True
    usage_counts: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.codes.ndim != 2 or self.codes.shape[0] < 1:
            raise ConfigError(f"codebook needs a non-empty [K, d] matrix, got {self.codes.shape}")
        if self.usage_counts is None:
            self.usage_counts = np.zeros(self.K, dtype=np.int64)

    @property
    def K(self) -> int:
        return self.codes.shape[0]

    @property
    def d_lookup(self) -> int:
        return self.codes.shape[1]

    def record(self, indices) -> None:
        self.usage_counts += np.bincount(np.asarray(indices).ravel(), minlength=self.K)

    def reset_usage(self) -> None:
        self.usage_counts[:] = 0

    def usage(self) -> tuple[float, float]:
        return usage_from_counts(self.usage_counts)


@dataclass
class QuantizeResult:
    indices: np.ndarray
    quantized: Tensor
    vq_loss: Tensor
    codebook_loss: Tensor
    commitment_loss: Tensor  # already multiplied by beta
    lookup: Tensor  # matched-space features the losses were computed on
    zero_vectors: int = 0


def init_quantizer(params: Params, config: QuantizerConfig, rng: np.random.Generator, dtype) -> None:
    config.validate()
    params["quant.codes"] = param(rng.normal(size=(config.K, config.d_lookup)) / math.sqrt(config.d_lookup), dtype)
    if config.factorized:
        params["quant.in.w"] = param(rng.normal(size=(config.d_model, config.d_lookup)) / math.sqrt(config.d_model), dtype)
        params["quant.out.w"] = param(rng.normal(size=(config.d_lookup, config.d_model)) / math.sqrt(config.d_lookup), dtype)


def codebook_from(params: Params, config: QuantizerConfig) -> Codebook:
    return Codebook(params["quant.codes"], config.l2_normalized)


def project_to_lookup(z_e: Tensor, proj: Tensor) -> Tensor:
    """Linear map from encoder width to lookup width."""
    if z_e.shape[-1] != proj.shape[0]:
        raise T.ShapeError(f"cannot project features of width {z_e.shape[-1]} with a {proj.shape} matrix")
    return T.matmul(z_e, proj)


def normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit-normalize rows; all-zero rows become the first basis vector.

    Returns the normalized rows and a boolean mask flagging the zero rows.
    """
    x = np.asarray(x)
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    zero = norms[..., 0] == 0
    out = x / np.where(norms == 0, 1, norms)
    if zero.any():
        out[zero] = 0
        out[zero, 0] = 1
    return out, zero


def _squared_distances(z: np.ndarray, e: np.ndarray) -> np.ndarray:
    return (z * z).sum(1)[:, None] - 2.0 * (z @ e.T) + (e * e).sum(1)[None, :]


def nearest_code(z, codebook: Codebook | np.ndarray, l2_normalized: bool | None = None) -> np.ndarray:
    """Index of the closest code row for each row of ``z`` (ties go to the lowest index).

    Args:
        z: [N, d] features (Tensor or array).
        codebook: a :class:`Codebook` or a raw [K, d] array.
        l2_normalized: overrides the codebook's mode when given.
    """
    z = z.data if isinstance(z, Tensor) else np.asarray(z)
    if isinstance(codebook, Codebook):
        codes = codebook.codes.data
        l2 = codebook.l2_normalized if l2_normalized is None else l2_normalized
    else:
        codes = np.asarray(codebook)
        l2 = bool(l2_normalized)
    if codes.ndim != 2 or codes.shape[0] == 0:
        raise ConfigError("empty codebook")
    if z.shape[-1] != codes.shape[1]:
        raise T.ShapeError(f"features of width {z.shape[-1]} vs codes of width {codes.shape[1]}")
    if not np.isfinite(z).all():
        raise T.NumericError("nearest_code input is not finite")
    lead = z.shape[:-1]
    z = z.reshape(-1, codes.shape[1])
    if l2:
        z, _ = normalize_rows(z)
        codes, _ = normalize_rows(codes)
    # Expanded-form distances are fast but round differently from a direct
    # sum of squared differences; near-ties are re-ranked with the direct form.
    dist = _squared_distances(z, codes)
    best = dist.min(axis=1, keepdims=True)
    scale = (z * z).sum(1, keepdims=True) + (codes * codes).sum(1).max()
    near = dist <= best + 1e-4 * scale + 1e-30
    idx = dist.argmin(axis=1)
    rows = np.flatnonzero(near.sum(axis=1) > 1)
    for r in rows:
        cand = np.flatnonzero(near[r])
        diff = z[r][None, :] - codes[cand]
        idx[r] = cand[np.argmin((diff * diff).sum(axis=1))]
    return idx.reshape(lead)


def code_embedding(indices: np.ndarray, params: Params, config: QuantizerConfig) -> Tensor:
    """Decoder-side embedding of code ids, shape ``indices.shape + (d_model,)``."""
    flat = np.asarray(indices).reshape(-1)
    codes = params["quant.codes"]
    if config.l2_normalized:
        codes = T.l2_normalize(codes)
    e = T.embedding(codes, flat)
    if config.factorized:
        e = T.matmul(e, params["quant.out.w"])
    return e.reshape(*np.shape(indices), config.d_model)


def quantize_straight_through(z_e: Tensor, params: Params, config: QuantizerConfig) -> QuantizeResult:
    """Quantize encoder features [..., d_model] with a straight-through gradient."""
    if z_e.shape[-1] != config.d_model:
        raise T.ShapeError(f"encoder width {z_e.shape[-1]} != quantizer d_model {config.d_model}")
    lead = z_e.shape[:-1]
    z = z_e.reshape(-1, config.d_model)
    if config.factorized:
        z = project_to_lookup(z, params["quant.in.w"])
    codes = params["quant.codes"]
    indices = nearest_code(z.data, codes.data, config.l2_normalized)
    zero_vectors = int(config.l2_normalized and (np.abs(z.data).sum(axis=1) == 0).sum())
    if config.l2_normalized:
        z = T.l2_normalize(z)
        codes = T.l2_normalize(codes)
    e = T.embedding(codes, indices)
    codebook_loss = ((T.stop_gradient(z) - e) * (T.stop_gradient(z) - e)).sum(axis=1).mean()
    z_minus_e = z - T.stop_gradient(e)
    commitment_loss = T.scale((z_minus_e * z_minus_e).sum(axis=1).mean(), config.beta)
    vq_loss = codebook_loss + commitment_loss
    q = T.straight_through(z, e)
    if config.factorized:
        q = T.matmul(q, params["quant.out.w"])
    return QuantizeResult(
        indices=indices.reshape(lead),
        quantized=q.reshape(*lead, config.d_model),
        vq_loss=vq_loss,
        codebook_loss=codebook_loss,
        commitment_loss=commitment_loss,
        lookup=z,
        zero_vectors=zero_vectors,
    )


def normalized_distance_identity_check(z, e) -> tuple[float, float]:
    """Return (||l2(z) - l2(e)||^2, 2 - 2 cos(z, e)); the two agree up to rounding."""
    z = np.asarray(z, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    nz, ne = np.linalg.norm(z), np.linalg.norm(e)
    if nz == 0 or ne == 0:
        raise T.NumericError("normalized distance is undefined for a zero vector")
    d = z / nz - e / ne
    return float(d @ d), float(2.0 - 2.0 * (z @ e) / (nz * ne))


def usage_from_counts(counts: np.ndarray) -> tuple[float, float]:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("usage window is empty")
    p = counts[counts > 0] / total
    return float((counts > 0).sum() / counts.size), float(np.exp(-(p * np.log(p)).sum()))


def codebook_usage(indices, K: int) -> tuple[float, float]:
    """(fraction of the K codes hit, perplexity of the empirical code distribution)."""
    flat = np.asarray(indices).ravel()
    if flat.size == 0:
        raise ValueError("usage window is empty")
    return usage_from_counts(np.bincount(flat, minlength=K))
