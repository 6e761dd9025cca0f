"""Stage-1 ViT vector-quantizing autoencoder.

patchify -> linear patch embedding + learned position table -> pre-norm
transformer blocks -> tanh output head -> quantizer -> transformer blocks ->
tanh output head -> unpatchify. The decoder emits two values per pixel and
channel: a logit-space location ``mu`` and a log scale ``log_b``. The image
estimate ``x_hat`` is read off ``mu``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError
from .nn import Params
from .quantizer import QuantizerConfig, QuantizeResult, code_embedding, init_quantizer, quantize_straight_through
from .tensor import Tensor


@dataclass
class CodecConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    enc_blocks: int = 2
    enc_heads: int = 2
    enc_d_model: int = 32
    enc_d_hidden: int = 64
    dec_blocks: int = 2
    dec_heads: int = 2
    dec_d_model: int = 32
    dec_d_hidden: int = 64
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    w_vq: float = 1.0
    w_adv: float = 0.1
    w_perceptual: float = 0.1  # kept for the record; no perceptual term is computed
    w_logitlaplace: float = 0.1
    w_l2: float = 1.0
    logit_laplace_eps: float = 0.1
    discriminator: bool = False
    disc_hidden: int = 64

    def validate(self) -> CodecConfig:
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        for part in ("enc", "dec"):
            d, h = getattr(self, f"{part}_d_model"), getattr(self, f"{part}_heads")
            if d % h:
                raise ConfigError(f"{part}: heads {h} do not divide d_model {d}")
        if self.quantizer.d_model != self.enc_d_model:
            raise ConfigError(f"quantizer d_model {self.quantizer.d_model} != encoder d_model {self.enc_d_model}")
        if not 0 < self.logit_laplace_eps < 0.5:
            raise ConfigError("logit_laplace_eps must lie in (0, 0.5)")
        for w in ("w_vq", "w_adv", "w_perceptual", "w_logitlaplace", "w_l2"):
            if getattr(self, w) < 0:
                raise ConfigError(f"loss weight {w} must be non-negative")
        self.quantizer.validate()
        return self

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass
class ReconOutput:
    mu: Tensor
    log_b: Tensor
    x_hat: Tensor
    tokens: np.ndarray
    losses: dict[str, Tensor] = field(default_factory=dict)
    quant: QuantizeResult | None = None


# -- patches ------------------------------------------------------------------------


def patchify(images: Tensor, patch_size: int) -> Tensor:
    """[B, H, W, C] -> [B, N, p*p*C], raster-ordered patches flattened (row, col, channel)."""
    b, h, w, c = images.shape
    p = patch_size
    if h % p or w % p:
        raise T.ShapeError(f"image {h}x{w} not divisible into {p}x{p} patches")
    x = images.reshape(b, h // p, p, w // p, p, c)
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def unpatchify(patches: Tensor, patch_size: int, height: int, width: int) -> Tensor:
    """Inverse of :func:`patchify`; channel count is inferred from the patch width."""
    b, n, pd = patches.shape
    p = patch_size
    gh, gw = height // p, width // p
    if gh * gw != n or pd % (p * p):
        raise T.ShapeError(f"{n} patches of width {pd} do not tile a {height}x{width} image")
    c = pd // (p * p)
    x = patches.reshape(b, gh, gw, p, p, c)
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return x.reshape(b, height, width, c)


# -- parameters ----------------------------------------------------------------------


def init_codec(config: CodecConfig, rng: np.random.Generator, dtype=np.float32) -> Params:
    config.validate()
    p: Params = {}
    n, de, dd = config.num_patches, config.enc_d_model, config.dec_d_model
    nn.init_linear(p, "enc.patch", config.patch_dim, de, rng, dtype)
    p["enc.pos"] = nn.param(rng.normal(0, 0.02, size=(n, de)), dtype)
    for i in range(config.enc_blocks):
        nn.init_block(p, f"enc.block{i}", de, config.enc_d_hidden, rng, dtype)
    nn.init_layernorm(p, "enc.ln_f", de, dtype)
    nn.init_linear(p, "enc.head.fc", de, config.enc_d_hidden, rng, dtype)
    nn.init_linear(p, "enc.head.proj", config.enc_d_hidden, de, rng, dtype)
    init_quantizer(p, config.quantizer, rng, dtype)
    if dd != de:
        nn.init_linear(p, "dec.in", de, dd, rng, dtype)
    p["dec.pos"] = nn.param(rng.normal(0, 0.02, size=(n, dd)), dtype)
    for i in range(config.dec_blocks):
        nn.init_block(p, f"dec.block{i}", dd, config.dec_d_hidden, rng, dtype)
    nn.init_layernorm(p, "dec.ln_f", dd, dtype)
    nn.init_linear(p, "dec.head.fc", dd, config.dec_d_hidden, rng, dtype)
    nn.init_linear(p, "dec.head.proj", config.dec_d_hidden, 2 * config.patch_dim, rng, dtype)
    return p


def _tanh_head(params: Params, name: str, x: Tensor) -> Tensor:
    return nn.linear(params, f"{name}.proj", T.tanh(nn.linear(params, f"{name}.fc", x)))


# -- forward ---------------------------------------------------------------------------


def _as_tensor(images, dtype) -> Tensor:
    if isinstance(images, Tensor):
        return images
    return Tensor(np.asarray(images, dtype=dtype))


def encoder_features(images, params: Params, config: CodecConfig) -> Tensor:
    """Pre-quantization features z_e, shape [B, N, enc_d_model]."""
    x = _as_tensor(images, params["enc.pos"].dtype)
    if x.ndim != 4 or x.shape[1:] != (config.image_size, config.image_size, config.channels):
        raise T.ShapeError(
            f"expected images [B, {config.image_size}, {config.image_size}, {config.channels}], got {x.shape}"
        )
    h = nn.linear(params, "enc.patch", patchify(x, config.patch_size)) + params["enc.pos"]
    for i in range(config.enc_blocks):
        h = nn.block(params, f"enc.block{i}", h, config.enc_heads)
    return _tanh_head(params, "enc.head", nn.layernorm(params, "enc.ln_f", h))


def encode(images, params: Params, config: CodecConfig) -> tuple[Tensor, np.ndarray]:
    """Return (z_e, token grid of shape [B, grid, grid])."""
    z_e = encoder_features(images, params, config)
    q = quantize_straight_through(z_e, params, config.quantizer)
    return z_e, q.indices.reshape(-1, config.grid, config.grid)


def _decode_embedded(e: Tensor, params: Params, config: CodecConfig) -> tuple[Tensor, Tensor, Tensor]:
    if "dec.in.w" in params:
        e = nn.linear(params, "dec.in", e)
    h = e + params["dec.pos"]
    for i in range(config.dec_blocks):
        h = nn.block(params, f"dec.block{i}", h, config.dec_heads)
    out = _tanh_head(params, "dec.head", nn.layernorm(params, "dec.ln_f", h))
    img = unpatchify(out, config.patch_size, config.image_size, config.image_size)
    c = config.channels
    mu, log_b = img[..., :c], img[..., c:]
    return mu, log_b, pixel_estimate(mu, config.logit_laplace_eps)


def decode(tokens, params: Params, config: CodecConfig) -> ReconOutput:
    """Decode token grids [B, grid, grid] (or [B, N]) to images."""
    tokens = np.asarray(tokens)
    b = tokens.shape[0]
    flat = tokens.reshape(b, -1)
    if flat.shape[1] != config.num_patches:
        raise T.ShapeError(f"expected {config.num_patches} tokens per image, got {flat.shape[1]}")
    e = code_embedding(flat, params, config.quantizer)
    mu, log_b, x_hat = _decode_embedded(e, params, config)
    return ReconOutput(mu=mu, log_b=log_b, x_hat=x_hat, tokens=flat.reshape(b, config.grid, config.grid))


def pixel_estimate(mu: Tensor, eps: float) -> Tensor:
    """x_hat = (sigmoid(mu) - eps) / (1 - 2 eps), clamped to [0, 1]."""
    x = T.scale(T.sigmoid(mu) - eps, 1.0 / (1.0 - 2.0 * eps))
    return T.clip(x, 0.0, 1.0)


def forward(images, params: Params, config: CodecConfig) -> ReconOutput:
    """Full autoencoding pass with loss components against the input images."""
    x = _as_tensor(images, params["enc.pos"].dtype)
    z_e = encoder_features(x, params, config)
    q = quantize_straight_through(z_e, params, config.quantizer)
    mu, log_b, x_hat = _decode_embedded(q.quantized, params, config)
    target = x.data
    losses = {
        "vq": q.vq_loss,
        "logit_laplace": logit_laplace_loss(mu, log_b, target, config.logit_laplace_eps),
        "l2": l2_recon_loss(x_hat, target),
    }
    tokens = q.indices.reshape(-1, config.grid, config.grid)
    return ReconOutput(mu=mu, log_b=log_b, x_hat=x_hat, tokens=tokens, losses=losses, quant=q)


# -- losses ---------------------------------------------------------------------------------


def logit_laplace_loss(mu: Tensor, log_b: Tensor, x, eps: float) -> Tensor:
    """Mean per-pixel NLL of a Laplace(mu, b) density placed on logit((1-2eps)x + eps)."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    xs = ((1.0 - 2.0 * eps) * x + eps).astype(mu.dtype)
    target_logit = Tensor(np.log(xs / (1.0 - xs)))
    const = Tensor(np.log(2.0 * xs * (1.0 - xs)))
    nll = const + log_b + T.abs_(target_logit - mu) * T.exp(-log_b)
    return nll.mean()


def l2_recon_loss(x_hat: Tensor, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=x_hat.dtype))
    if x.shape != x_hat.shape:
        raise T.ShapeError(f"l2 loss shape mismatch {x_hat.shape} vs {x.shape}")
    d = x_hat - x
    return (d * d).mean()


def codec_total_loss(components: dict, config: CodecConfig | None = None, **weights) -> Tensor | float:
    """Weighted sum of the loss components present in ``components``.

    Recognized keys: ``vq``, ``adv``, ``logit_laplace``, ``l2``. Weights come
    from ``config`` (defaults 1.0 / 0.1 / 0.1 / 1.0) and may be overridden by
    keyword, e.g. ``w_adv=0.0``.
    """
    cfg = config or CodecConfig()
    w = {
        "vq": weights.get("w_vq", cfg.w_vq),
        "adv": weights.get("w_adv", cfg.w_adv),
        "logit_laplace": weights.get("w_logitlaplace", cfg.w_logitlaplace),
        "l2": weights.get("w_l2", cfg.w_l2),
    }
    if any(v < 0 for v in w.values()):
        raise ConfigError(f"negative loss weight in {w}")
    if "perceptual" in components:
        raise ConfigError("perceptual loss is not supported")
    unknown = set(components) - set(w)
    if unknown:
        raise ConfigError(f"unknown loss components {sorted(unknown)}")
    total = 0.0
    for key, value in components.items():
        term = T.scale(value, w[key]) if isinstance(value, Tensor) else w[key] * value
        total = term + total if isinstance(term, Tensor) else total + term
    return total


# -- optional patch discriminator --------------------------------------------------------------


def init_discriminator(config: CodecConfig, rng: np.random.Generator, dtype=np.float32) -> Params:
    p: Params = {}
    nn.init_linear(p, "disc.fc", config.patch_dim, config.disc_hidden, rng, dtype, std=0.1)
    nn.init_linear(p, "disc.out", config.disc_hidden, 1, rng, dtype, std=0.1)
    return p


def discriminate(images: Tensor, disc: Params, config: CodecConfig) -> Tensor:
    """Per-patch realness scores, shape [B, N]."""
    h = T.gelu(nn.linear(disc, "disc.fc", patchify(images, config.patch_size)))
    out = nn.linear(disc, "disc.out", h)
    return out.reshape(out.shape[0], out.shape[1])


def patch_discriminator_loss(x_hat: Tensor, x, disc: Params | None, config: CodecConfig) -> tuple[Tensor, Tensor]:
    """Hinge losses (g_loss, d_loss).

    ``g_loss`` = -mean D(x_hat) carries gradient into the generator through
    ``x_hat`` only; ``d_loss`` sees a detached ``x_hat`` so it only trains D.
    """
    if not config.discriminator or disc is None:
        raise ConfigError("discriminator is disabled in this codec config")
    real = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=x_hat.dtype))
    g_loss = -discriminate(x_hat, disc, config).mean()
    d_real = discriminate(T.stop_gradient(real), disc, config)
    d_fake = discriminate(T.stop_gradient(x_hat), disc, config)
    d_loss = T.relu(1.0 - d_real).mean() + T.relu(1.0 + d_fake).mean()
    return g_loss, d_loss


def hinge_losses(d_real: np.ndarray, d_fake: np.ndarray) -> tuple[float, float]:
    """Closed-form hinge losses for given discriminator outputs."""
    d_loss = np.maximum(0.0, 1.0 - d_real).mean() + np.maximum(0.0, 1.0 + d_fake).mean()
    return float(-np.mean(d_fake)), float(d_loss)
