"""Training loops for the codec (stage 1) and the token prior (stage 2).

Both stages share :class:`TrainState`: parameters, Adam moments, the data
RNG and a step counter. Everything needed to continue a run bit-exactly is
stored in a checkpoint, so ``run(state, 10)`` equals ``run(state, 5)``,
save, load and ``run(state, 5)``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import codec, nn
from . import config as cfgmod
from . import prior as pr
from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .codec import CodecConfig
from .errors import ConfigError, NumericError
from .nn import Params
from .optim import AdamState, Schedule, adam_step, clip_grad_norm, schedule_lr
from .prior import PriorConfig
from .quantizer import usage_from_counts


@dataclass
class TrainConfig:
    """Optimization settings.

    ``warmup_steps`` and ``decay_start`` default to fractions of ``steps``
    when left as ``None``.
    """

    steps: int = 5000
    batch_size: int = 8
    schedule: str = "warmup_cosine"
    peak_lr: float = 2e-3
    floor_lr: float = 1e-3
    warmup_steps: int | None = None
    warmup_frac: float = 0.1
    decay_start: int | None = None
    decay_start_frac: float = 0.16
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    seed: int = 0
    augment: bool = True
    dtype: str = "float32"
    eval_every: int = 0
    checkpoint_every: int = 0

    def validate(self) -> TrainConfig:
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        self.lr_schedule().validate()
        return self

    def lr_schedule(self) -> Schedule:
        warm = self.warmup_steps if self.warmup_steps is not None else int(round(self.warmup_frac * self.steps))
        decay = None
        if self.schedule == "warmup_exponential":
            decay = self.decay_start if self.decay_start is not None else int(round(self.decay_start_frac * self.steps))
            decay = max(decay, warm)
        return Schedule(self.schedule, self.peak_lr, warm, self.steps, self.floor_lr, decay)

    @classmethod
    def stage1(cls, **overrides) -> TrainConfig:
        """Desk-scale stage-1 defaults."""
        return dataclasses.replace(cls(), **overrides)

    @classmethod
    def stage2(cls, **overrides) -> TrainConfig:
        """Desk-scale stage-2 defaults: exponential decay and beta2 = 0.96."""
        base = cls(steps=10_000, batch_size=16, schedule="warmup_exponential", peak_lr=1e-3,
                   floor_lr=1e-3 / 45, beta2=0.96, augment=False)
        return dataclasses.replace(base, **overrides)

    @classmethod
    def stage1_full(cls) -> TrainConfig:
        """Record of the full-scale stage-1 recipe."""
        return cls(steps=500_000, batch_size=256, schedule="warmup_cosine", peak_lr=1e-4, floor_lr=5e-5,
                   warmup_steps=50_000, beta2=0.99)

    @classmethod
    def stage2_full(cls) -> TrainConfig:
        """Record of the full-scale stage-2 recipe."""
        return cls(steps=450_000, batch_size=1024, schedule="warmup_exponential", peak_lr=4.5e-4,
                   floor_lr=1e-5, warmup_steps=5_000, decay_start=80_000, beta2=0.96, augment=False)


@dataclass
class TrainState:
    stage: int
    model_config: CodecConfig | PriorConfig
    train_config: TrainConfig
    params: Params
    opt: AdamState
    rng: np.random.Generator
    step: int = 0
    disc: Params | None = None
    disc_opt: AdamState | None = None
    history: list[dict] = field(default_factory=list)

    @property
    def dtype(self):
        return np.dtype(self.train_config.dtype)


def _adam(tc: TrainConfig) -> AdamState:
    return AdamState(beta1=tc.beta1, beta2=tc.beta2, eps=tc.adam_eps, weight_decay=tc.weight_decay)


def init_stage1(model_config: CodecConfig, train_config: TrainConfig) -> TrainState:
    model_config.validate()
    train_config.validate()
    init_rng = np.random.default_rng([train_config.seed, 1])
    dtype = np.dtype(train_config.dtype)
    params = codec.init_codec(model_config, init_rng, dtype)
    disc = codec.init_discriminator(model_config, init_rng, dtype) if model_config.discriminator else None
    return TrainState(1, model_config, train_config, params, _adam(train_config),
                      np.random.default_rng([train_config.seed, 2]), disc=disc,
                      disc_opt=_adam(train_config) if disc is not None else None)


def init_stage2(model_config: PriorConfig, train_config: TrainConfig) -> TrainState:
    model_config.validate()
    train_config.validate()
    dtype = np.dtype(train_config.dtype)
    params = pr.init_prior(model_config, np.random.default_rng([train_config.seed, 1]), dtype)
    return TrainState(2, model_config, train_config, params, _adam(train_config),
                      np.random.default_rng([train_config.seed, 2]))


# -- augmentation ------------------------------------------------------------------------------


def augment_batch(images: np.ndarray, rng: np.random.Generator, scale=(0.8, 1.0)) -> np.ndarray:
    """Random horizontal flip then a random square crop of area fraction ``scale`` resized back (bilinear)."""
    b, h, w, _ = images.shape
    out = np.empty_like(images)
    for i in range(b):
        img = images[i, :, ::-1] if rng.random() < 0.5 else images[i]
        side = math.sqrt(rng.uniform(*scale))
        ch, cw = side * h, side * w
        top = rng.uniform(0.0, h - ch)
        left = rng.uniform(0.0, w - cw)
        ys = np.clip(top + (np.arange(h) + 0.5) * ch / h - 0.5, 0, h - 1)
        xs = np.clip(left + (np.arange(w) + 0.5) * cw / w - 0.5, 0, w - 1)
        y0 = np.floor(ys).astype(int)
        x0 = np.floor(xs).astype(int)
        y1 = np.minimum(y0 + 1, h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        fy = (ys - y0)[:, None, None]
        fx = (xs - x0)[None, :, None]
        top_row = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
        bot_row = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
        out[i] = top_row * (1 - fy) + bot_row * fy
    return out


# -- single steps ------------------------------------------------------------------------------------


def _check_finite(name: str, value: float, step: int) -> None:
    if not math.isfinite(value):
        raise NumericError(f"{name} became {value} at step {step}")


def stage1_step(state: TrainState, images: np.ndarray) -> dict:
    """One optimization step on a batch drawn from ``images`` [N, H, W, C]."""
    cfg: CodecConfig = state.model_config
    tc = state.train_config
    idx = state.rng.integers(0, len(images), size=tc.batch_size)
    x = images[idx]
    if tc.augment:
        x = augment_batch(x, state.rng)
    x = x.astype(state.dtype, copy=False)
    lr = schedule_lr(tc.lr_schedule(), state.step)
    nn.zero_grads(state.params)
    out = codec.forward(x, state.params, cfg)
    comps = dict(out.losses)
    d_loss = None
    if state.disc is not None:
        comps["adv"], d_loss = codec.patch_discriminator_loss(out.x_hat, x, state.disc, cfg)
    total = codec.codec_total_loss(comps, cfg)
    _check_finite("stage-1 loss", float(total.data), state.step)
    total.backward()
    gnorm = clip_grad_norm(state.params, tc.grad_clip)
    adam_step(state.params, state.opt, lr)
    rec = {"step": state.step, "lr": lr, "loss": float(total.data), "grad_norm": gnorm}
    rec.update({k: float(v.data) for k, v in comps.items()})
    if d_loss is not None:
        # generator first, then the discriminator on the same batch
        nn.zero_grads(state.disc)
        d_loss.backward()
        clip_grad_norm(state.disc, tc.grad_clip)
        adam_step(state.disc, state.disc_opt, lr)
        rec["d_loss"] = float(d_loss.data)
    counts = np.bincount(out.tokens.reshape(-1), minlength=cfg.quantizer.K)
    rec["batch_fraction_used"], rec["batch_perplexity"] = usage_from_counts(counts)
    state.step += 1
    return rec


def check_vocabulary(ids: np.ndarray, config: PriorConfig, K: int | None = None) -> None:
    if K is not None and K != config.K:
        raise ConfigError(f"token corpus vocabulary {K} != prior vocabulary {config.K}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.K):
        raise ConfigError(f"token ids span [{ids.min()}, {ids.max()}], outside the prior vocabulary [0, {config.K})")
    if ids.shape[-1] != config.num_tokens:
        raise ConfigError(f"grids hold {ids.shape[-1]} tokens, prior expects {config.num_tokens}")


def stage2_step(state: TrainState, ids: np.ndarray, labels: np.ndarray | None) -> dict:
    cfg: PriorConfig = state.model_config
    tc = state.train_config
    idx = state.rng.integers(0, len(ids), size=tc.batch_size)
    lab = None if labels is None else labels[idx]
    lr = schedule_lr(tc.lr_schedule(), state.step)
    nn.zero_grads(state.params)
    loss = pr.nll_batch(ids[idx], lab, state.params, cfg, training=True, rng=state.rng)
    _check_finite("stage-2 loss", float(loss.data), state.step)
    loss.backward()
    gnorm = clip_grad_norm(state.params, tc.grad_clip)
    adam_step(state.params, state.opt, lr)
    state.step += 1
    return {"step": state.step - 1, "lr": lr, "loss": float(loss.data), "grad_norm": gnorm}


# -- evaluation -------------------------------------------------------------------------------------


def evaluate_codec(params: Params, config: CodecConfig, images: np.ndarray, batch_size: int = 100) -> dict:
    """Eval-mode reconstruction losses and codebook usage over ``images`` (no augmentation)."""
    totals = {"l2": 0.0, "logit_laplace": 0.0, "vq": 0.0}
    counts = np.zeros(config.quantizer.K, dtype=np.int64)
    dtype = params["enc.pos"].dtype
    for s in range(0, len(images), batch_size):
        x = np.asarray(images[s:s + batch_size], dtype=dtype)
        with T.no_grad():
            out = codec.forward(x, params, config)
        for k in totals:
            totals[k] += float(out.losses[k].data) * len(x)
        counts += np.bincount(out.tokens.reshape(-1), minlength=config.quantizer.K)
    res = {f"eval_{k}": v / len(images) for k, v in totals.items()}
    res["fraction_used"], res["perplexity"] = usage_from_counts(counts)
    return res


def evaluate_prior(params: Params, config: PriorConfig, ids: np.ndarray, labels: np.ndarray | None,
                   batch_size: int = 64) -> dict:
    """Held-out NLL in nats/token; dropout is never active here."""
    per = pr.per_grid_nll(ids, labels, params, config, batch_size)
    return {"eval_nll": float(per.mean())}


# -- loops ----------------------------------------------------------------------------------------------


def smoothed(values, alpha: float = 0.05) -> np.ndarray:
    """Exponential moving average with bias correction."""
    out = np.empty(len(values))
    avg = 0.0
    for i, v in enumerate(values):
        avg = (1 - alpha) * avg + alpha * v
        out[i] = avg / (1 - (1 - alpha) ** (i + 1))
    return out


def run(
    state: TrainState,
    steps: int,
    train_data: tuple,
    eval_data: tuple | None = None,
    checkpoint_path=None,
    log: Callable[[dict], None] | None = None,
) -> TrainState:
    """Advance ``state`` by ``steps`` steps (capped at ``train_config.steps``).

    ``train_data`` is ``(images,)`` for stage 1 and ``(ids, labels)`` for
    stage 2. When a step produces a non-finite loss or gradient a
    :class:`NumericError` is raised; the checkpoint on disk is left at the
    last good save.
    """
    tc = state.train_config
    end = min(state.step + steps, tc.steps)
    if state.stage == 2:
        check_vocabulary(train_data[0], state.model_config)
    while state.step < end:
        if state.stage == 1:
            rec = stage1_step(state, train_data[0])
        else:
            rec = stage2_step(state, *train_data)
        if tc.eval_every and eval_data is not None and state.step % tc.eval_every == 0:
            rec.update(evaluate(state, eval_data))
        state.history.append(rec)
        if log is not None:
            log(rec)
        if checkpoint_path is not None and tc.checkpoint_every and state.step % tc.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, to_checkpoint(state))
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, to_checkpoint(state))
    return state


def evaluate(state: TrainState, eval_data: tuple) -> dict:
    if state.stage == 1:
        return evaluate_codec(state.params, state.model_config, eval_data[0])
    return evaluate_prior(state.params, state.model_config, *eval_data)


def train_stage1(images: np.ndarray, model_config: CodecConfig, train_config: TrainConfig,
                 eval_images: np.ndarray | None = None, checkpoint_path=None, log=None) -> TrainState:
    if len(images) == 0:
        raise ConfigError("stage-1 dataset is empty")
    state = init_stage1(model_config, train_config)
    return run(state, train_config.steps, (images,), None if eval_images is None else (eval_images,),
               checkpoint_path, log)


def train_stage2(ids: np.ndarray, labels: np.ndarray | None, model_config: PriorConfig, train_config: TrainConfig,
                 eval_data: tuple | None = None, checkpoint_path=None, log=None, K: int | None = None) -> TrainState:
    ids = np.asarray(ids, dtype=np.int64).reshape(len(ids), -1)
    if len(ids) == 0:
        raise ConfigError("stage-2 token dataset is empty")
    check_vocabulary(ids, model_config, K)
    state = init_stage2(model_config, train_config)
    return run(state, train_config.steps, (ids, labels), eval_data, checkpoint_path, log)


# -- checkpoint conversion ------------------------------------------------------------------------------


def _opt_tensors(prefix: str, opt: AdamState) -> dict[str, np.ndarray]:
    out = {}
    for name in opt.m:
        out[f"{prefix}.m/{name}"] = opt.m[name]
        out[f"{prefix}.v/{name}"] = opt.v[name]
    return out


def to_checkpoint(state: TrainState) -> Checkpoint:
    model_key = "codec" if state.stage == 1 else "prior"
    flat = {"stage": str(state.stage), "opt.t": str(state.opt.t)}
    flat.update(cfgmod.to_flat(state.model_config, model_key + "."))
    flat.update(cfgmod.to_flat(state.train_config, "train."))
    tensors = {f"param/{k}": p.data for k, p in state.params.items()}
    tensors.update(_opt_tensors("opt", state.opt))
    if state.disc is not None:
        flat["disc_opt.t"] = str(state.disc_opt.t)
        tensors.update({f"disc/{k}": p.data for k, p in state.disc.items()})
        tensors.update(_opt_tensors("disc_opt", state.disc_opt))
    return Checkpoint(config=flat, tensors=tensors, rng_state=state.rng.bit_generator.state, step=state.step)


def _restore_opt(prefix: str, tensors: dict, tc: TrainConfig, t: int) -> AdamState:
    opt = _adam(tc)
    opt.t = t
    for key, arr in tensors.items():
        if key.startswith(prefix + ".m/"):
            name = key[len(prefix) + 3:]
            opt.m[name] = arr.copy()
            opt.v[name] = tensors[f"{prefix}.v/{name}"].copy()
    return opt


def model_config_from(ckpt: Checkpoint) -> CodecConfig | PriorConfig:
    stage = int(ckpt.config.get("stage", "0"))
    if stage == 1:
        return cfgmod.from_flat(CodecConfig, _section(ckpt.config, "codec."), "").validate()
    if stage == 2:
        return cfgmod.from_flat(PriorConfig, _section(ckpt.config, "prior."), "").validate()
    raise ConfigError(f"checkpoint has unknown stage {ckpt.config.get('stage')!r}")


def _section(flat: dict[str, str], prefix: str) -> dict[str, str]:
    return {k[len(prefix):]: v for k, v in flat.items() if k.startswith(prefix)}


def from_checkpoint(ckpt: Checkpoint) -> TrainState:
    stage = int(ckpt.config.get("stage", "0"))
    model_config = model_config_from(ckpt)
    tc = cfgmod.from_flat(TrainConfig, _section(ckpt.config, "train."), "")
    params = {k[6:]: T.Tensor(v.copy(), requires_grad=True) for k, v in ckpt.tensors.items() if k.startswith("param/")}
    opt = _restore_opt("opt", ckpt.tensors, tc, int(ckpt.config.get("opt.t", "0")))
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    disc = disc_opt = None
    if any(k.startswith("disc/") for k in ckpt.tensors):
        disc = {k[5:]: T.Tensor(v.copy(), requires_grad=True) for k, v in ckpt.tensors.items() if k.startswith("disc/")}
        disc_opt = _restore_opt("disc_opt", ckpt.tensors, tc, int(ckpt.config.get("disc_opt.t", "0")))
    return TrainState(stage, model_config, tc, params, opt, rng, step=ckpt.step, disc=disc, disc_opt=disc_opt)


def load_state(path) -> TrainState:
    return from_checkpoint(load_checkpoint(path))


def load_model(path, expect_stage: int | None = None) -> tuple[Params, CodecConfig | PriorConfig]:
    """Frozen parameters and model config from a checkpoint file."""
    state = load_state(path)
    if expect_stage is not None and state.stage != expect_stage:
        raise ConfigError(f"checkpoint {path} holds a stage-{state.stage} model, expected stage {expect_stage}")
    return state.params, state.model_config
