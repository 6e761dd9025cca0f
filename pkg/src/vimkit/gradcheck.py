"""Finite-difference gradient checks for every differentiable op and model loss.

Each registry entry builds a scalar float64 function of named inputs; the
analytic gradient from ``backward`` is compared against central differences
on a random subset of coordinates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import codec, nn
from . import prior as pr
from . import tensor as T
from .codec import CodecConfig
from .prior import PriorConfig
from .quantizer import QuantizerConfig, init_quantizer, normalize_rows, project_to_lookup, quantize_straight_through
from .tensor import Tensor

DEFAULT_TOL = 1e-4


@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    max_abs_err: float
    coords: int
    seconds: float = 0.0
    tol: float = DEFAULT_TOL

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)


def grad_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    inputs: dict[str, np.ndarray],
    h: float = 1e-5,
    tol: float = DEFAULT_TOL,
    max_coords: int = 24,
    floor: float = 1e-6,
    seed: int = 0,
    name: str = "f",
) -> GradCheckReport:
    """Compare ``backward`` against central differences of ``f``.

    Stop-gradient and straight-through branches are held at their base-point
    values during the perturbed evaluations (see :func:`frozen_branches`).

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps coordinates with a (near) zero gradient from dominating.
    At most ``max_coords`` coordinates per input are probed.
    """
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    arrays = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    frozen = T._Frozen()

    def evaluate(with_grad: bool):
        ts = {k: Tensor(v.copy(), requires_grad=with_grad) for k, v in arrays.items()}
        with T.frozen_branches(frozen):
            frozen.cursor = 0
            if with_grad:
                out = f(ts)
                out.backward()
                return float(out.data), {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in ts.items()}
            with T.no_grad():
                return float(f(ts).data), None

    # the base pass records stopped branches; perturbed passes replay them
    _, analytic = evaluate(True)
    frozen.replay = True
    worst_rel = worst_abs = 0.0
    n = 0
    for key, arr in arrays.items():
        flat = arr.reshape(-1)
        picks = np.arange(flat.size) if flat.size <= max_coords else rng.choice(flat.size, max_coords, replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            fp, _ = evaluate(False)
            flat[i] = orig - h
            fm, _ = evaluate(False)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = float(analytic[key].reshape(-1)[i])
            err = abs(a - num)
            worst_abs = max(worst_abs, err)
            worst_rel = max(worst_rel, err / max(abs(a), abs(num), floor))
            n += 1
    return GradCheckReport(name, worst_rel, worst_abs, n, time.perf_counter() - start, tol)


# -- registry ------------------------------------------------------------------------------------

Case = tuple[Callable[[dict[str, Tensor]], Tensor], dict[str, np.ndarray]]
_REGISTRY: dict[str, tuple[str, Callable[[np.random.Generator], Case]]] = {}


def register(name: str, group: str = "tensor"):
    def deco(builder):
        _REGISTRY[name] = (group, builder)
        return builder
    return deco


def _weighted(out: Tensor, rng: np.random.Generator) -> Tensor:
    # random projection so every output coordinate contributes a distinct weight
    w = rng.normal(size=out.shape)
    return T.sum_(out * w)


def _away_from(x: np.ndarray, points, margin: float = 0.05) -> np.ndarray:
    for p in points:
        close = np.abs(x - p) < margin
        x = np.where(close, p + np.sign(x - p + 1e-12) * margin * 2, x)
    return x


def _unary(name, op, lo=-2.0, hi=2.0, kinks=()):
    @register(name)
    def build(rng):
        x = _away_from(rng.uniform(lo, hi, size=(3, 4)), kinks)
        return (lambda p: _weighted(op(p["x"]), np.random.default_rng(1))), {"x": x}
    return build


_unary("exp", T.exp)
_unary("log", T.log, 0.2, 3.0)
_unary("sqrt", T.sqrt, 0.2, 3.0)
_unary("tanh", T.tanh)
_unary("sigmoid", T.sigmoid, -6.0, 6.0)
_unary("gelu", T.gelu, -3.0, 3.0)
_unary("relu", T.relu, kinks=(0.0,))
_unary("abs", T.abs_, kinks=(0.0,))
_unary("clip", lambda x: T.clip(x, -0.5, 0.7), kinks=(-0.5, 0.7))
_unary("scale", lambda x: T.scale(x, -1.7))
_unary("stop_gradient", lambda x: x * T.stop_gradient(x))
_unary("masked_fill", lambda x: T.masked_fill(x, np.eye(3, 4, dtype=bool), -3.0))
_unary("sum_axis", lambda x: T.sum_(x, axis=1, keepdims=True) * x)
_unary("mean_axis", lambda x: T.mean(x, axis=0) * x)
_unary("reshape", lambda x: x.reshape(4, 3))
_unary("transpose", lambda x: T.transpose(x))
_unary("getitem_slice", lambda x: x[1:, ::2])
_unary("getitem_fancy", lambda x: x[np.array([0, 2, 0]), np.array([1, 1, 3])])
_unary("softmax", lambda x: T.softmax(x, axis=-1))
_unary("log_softmax", lambda x: T.log_softmax(x, axis=0))
_unary("l2_normalize", lambda x: T.l2_normalize(x, axis=-1))


def _binary(name, op, b_shape=(3, 4), b_lo=-2.0, b_hi=2.0):
    @register(name)
    def build(rng):
        a = rng.uniform(-2, 2, size=(3, 4))
        b = rng.uniform(b_lo, b_hi, size=b_shape)
        w = rng.normal(size=(3, 4))
        return (lambda p: T.sum_(op(p["a"], p["b"]) * w)), {"a": a, "b": b}
    return build


_binary("add_broadcast", T.add, (4,))
_binary("sub_broadcast", T.sub, (3, 1))
_binary("mul", T.mul)
_binary("div", T.div, (1, 4), 0.5, 2.0)
_binary("concat", lambda a, b: T.concat([a, b], axis=0)[1:4], (2, 4))


@register("straight_through")
def _st(rng):
    x = rng.normal(size=(5, 3))
    tgt = rng.normal(size=(5, 3))
    w = rng.normal(size=(5, 3))
    # forward value follows the target, gradient flows to x unchanged
    return (lambda p: T.sum_(T.straight_through(p["x"], Tensor(tgt)) * w) + T.sum_(p["x"] * p["x"])), {"x": x}


@register("dropout")
def _dropout(rng):
    x = rng.normal(size=(4, 6))
    w = rng.normal(size=(4, 6))
    return (lambda p: T.sum_(T.dropout(p["x"], 0.3, np.random.default_rng(7), True) * w)), {"x": x}


@register("matmul")
def _matmul(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    return (lambda p: _weighted(T.matmul(p["a"], p["b"]), np.random.default_rng(1))), {"a": a, "b": b}


@register("matmul_batched")
def _bmm(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))
    return (lambda p: _weighted(T.matmul(p["a"], p["b"]), np.random.default_rng(1))), {"a": a, "b": b}


@register("layernorm")
def _ln(rng):
    x, g, b = rng.normal(size=(3, 6)), rng.normal(1, 0.2, size=6), rng.normal(size=6)
    return (lambda p: _weighted(T.layernorm(p["x"], p["g"], p["b"]), np.random.default_rng(1))), {"x": x, "g": g, "b": b}


@register("embedding")
def _emb(rng):
    table = rng.normal(size=(6, 4))
    ids = np.array([[0, 3, 3], [5, 0, 1]])
    return (lambda p: _weighted(T.embedding(p["table"], ids), np.random.default_rng(1))), {"table": table}


@register("cross_entropy")
def _ce(rng):
    logits = rng.normal(size=(5, 7))
    targets = rng.integers(0, 7, size=5)
    return (lambda p: T.cross_entropy(p["logits"], targets)), {"logits": logits}


def _param_case(params: nn.Params, loss: Callable[[nn.Params], Tensor]) -> Case:
    arrays = {k: v.data.astype(np.float64) for k, v in params.items()}
    return (lambda p: loss(p)), arrays


@register("attention_causal", "nn")
def _attn(rng):
    p: nn.Params = {}
    nn.init_linear(p, "a.qkv", 8, 24, rng, np.float64, std=0.3)
    nn.init_linear(p, "a.out", 8, 8, rng, np.float64, std=0.3)
    x = rng.normal(size=(2, 5, 8))
    w = rng.normal(size=(2, 5, 8))

    def loss(ps):
        return T.sum_(nn.attention(ps, "a", ps["x"], 2, causal=True) * w)
    case = _param_case(p, loss)
    case[1]["x"] = x
    return case


@register("vit_block", "nn")
def _vit_block(rng):
    p: nn.Params = {}
    nn.init_block(p, "blk", 8, 16, rng, np.float64)
    for k in p:
        p[k].data = p[k].data + rng.normal(0, 0.2, size=p[k].shape)
    w = rng.normal(size=(2, 4, 8))

    def loss(ps):
        return T.sum_(nn.block(ps, "blk", ps["x"], 2) * w)
    case = _param_case(p, loss)
    case[1]["x"] = rng.normal(size=(2, 4, 8))
    return case


def _tie_margin(z: np.ndarray, codes: np.ndarray, l2: bool) -> float:
    if l2:
        z, codes = normalize_rows(z)[0], normalize_rows(codes)[0]
    d = ((z[:, None, :] - codes[None]) ** 2).sum(-1)
    d.sort(axis=1)
    return float((d[:, 1] - d[:, 0]).min())


def tiny_codec_config() -> CodecConfig:
    return CodecConfig(image_size=8, patch_size=4, enc_blocks=1, enc_heads=2, enc_d_model=8, enc_d_hidden=16,
                       dec_blocks=1, dec_heads=2, dec_d_model=8, dec_d_hidden=16,
                       quantizer=QuantizerConfig(K=8, d_model=8, d_lookup=4))


@register("vq_loss", "model")
def _vq(rng):
    cfg = QuantizerConfig(K=6, d_model=5, d_lookup=3)
    for _ in range(100):
        p: nn.Params = {}
        init_quantizer(p, cfg, rng, np.float64)
        z = rng.normal(size=(7, 5))
        if _tie_margin(project_to_lookup(Tensor(z), p["quant.in.w"]).data, p["quant.codes"].data, True) > 1e-2:
            break
    w = rng.normal(size=(7, 5))

    def loss(ps):
        q = quantize_straight_through(ps["z"], ps, cfg)
        return q.vq_loss + T.sum_(q.quantized * w)
    case = _param_case(p, loss)
    case[1]["z"] = z
    return case


@register("logit_laplace", "model")
def _ll(rng):
    x = rng.uniform(0, 1, size=(2, 4, 4, 3))
    return (lambda p: codec.logit_laplace_loss(p["mu"], p["log_b"], x, 0.1)), {
        "mu": rng.normal(size=x.shape), "log_b": rng.normal(0, 0.3, size=x.shape)}


@register("codec_loss", "model")
def _codec(rng):
    cfg = tiny_codec_config().validate()
    x = rng.uniform(0, 1, size=(2, 8, 8, 3))
    for _ in range(200):
        p = codec.init_codec(cfg, rng, np.float64)
        for k in p:
            if not k.endswith(".b") and not k.endswith(".g"):
                p[k].data = p[k].data + rng.normal(0, 0.1, size=p[k].shape)
        with T.no_grad():
            z = project_to_lookup(codec.encoder_features(x, p, cfg).reshape(-1, 8), p["quant.in.w"]).data
        if _tie_margin(z, p["quant.codes"].data, True) > 5e-3:
            break

    def loss(ps):
        out = codec.forward(x, ps, cfg)
        return codec.codec_total_loss(out.losses, cfg)
    return _param_case(p, loss)


def tiny_prior_config(conditional: bool = True) -> PriorConfig:
    return PriorConfig(blocks=2, heads=2, d_model=8, d_hidden=16, dropout=0.0, K=5, grid_h=2, grid_w=3,
                       num_classes=3 if conditional else None)


@register("prior_loss", "model")
def _prior(rng):
    cfg = tiny_prior_config()
    p = pr.init_prior(cfg, rng, np.float64)
    for k in p:
        p[k].data = p[k].data + rng.normal(0, 0.2, size=p[k].shape)
    ids = rng.integers(0, cfg.K, size=(3, cfg.num_tokens))
    labels = np.array([0, 2, 1])
    return _param_case(p, lambda ps: pr.nll_batch(ids, labels, ps, cfg))


def registered(group: str = "all") -> list[str]:
    return [k for k, (g, _) in _REGISTRY.items() if group == "all" or g == group]


def run_checks(group: str = "all", tol: float = DEFAULT_TOL, seed: int = 0, max_coords: int = 24) -> list[GradCheckReport]:
    """Run every registered check in ``group`` (``all``, ``tensor``, ``nn`` or ``model``)."""
    names = registered(group)
    if not names:
        raise KeyError(f"no gradient checks registered under {group!r}")
    reports = []
    for name in names:
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        f, inputs = _REGISTRY[name][1](rng)
        reports.append(grad_check(f, inputs, tol=tol, max_coords=max_coords, seed=seed, name=name))
    return reports
