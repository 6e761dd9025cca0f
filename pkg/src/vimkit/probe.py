"""Linear probes on frozen, sequence-averaged prior features."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .optim import AdamState, adam_step
from .prior import PriorConfig, extract_all_features
from .tensor import Tensor


@dataclass
class ProbeHead:
    """Softmax classifier over standardized features."""

    weight: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def logits(self, feats: np.ndarray) -> np.ndarray:
        return ((feats - self.mean) / self.std) @ self.weight + self.bias

    def predict(self, feats: np.ndarray) -> np.ndarray:
        return self.logits(feats).argmax(axis=1)


def default_block(blocks: int) -> int:
    """Middle-ish block (about 15/36 of the depth), never the last one when blocks > 1."""
    return max(0, min(math.ceil(blocks * 15 / 36), blocks - 1))


def probe_train(
    feats: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    steps: int = 500,
    lr: float = 0.05,
    weight_decay: float = 1e-4,
    seed: int = 0,
) -> ProbeHead:
    """Full-batch Adam on cross-entropy; the features stay frozen."""
    feats = np.asarray(feats, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(feats) != len(labels) or len(feats) == 0:
        raise ConfigError("probe needs a non-empty feature set with one label per row")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ConfigError(f"probe labels outside [0, {num_classes})")
    mean = feats.mean(axis=0)
    std = feats.std(axis=0) + 1e-6
    x = (feats - mean) / std
    rng = np.random.default_rng(seed)
    params = {
        "w": Tensor(rng.normal(0, 0.01, size=(x.shape[1], num_classes)), requires_grad=True),
        "b": Tensor(np.zeros(num_classes), requires_grad=True),
    }
    opt = AdamState(weight_decay=weight_decay)
    xt = Tensor(x)
    for _ in range(steps):
        for p in params.values():
            p.zero_grad()
        loss = T.cross_entropy(T.matmul(xt, params["w"]) + params["b"], labels)
        loss.backward()
        adam_step(params, opt, lr)
    return ProbeHead(params["w"].data.copy(), params["b"].data.copy(), mean, std)


def probe_eval(head: ProbeHead, feats: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy."""
    return float((head.predict(np.asarray(feats, dtype=np.float64)) == np.asarray(labels)).mean())


def probe_sweep(
    train_ids: np.ndarray,
    train_labels: np.ndarray,
    val_ids: np.ndarray,
    val_labels: np.ndarray,
    params,
    config: PriorConfig,
    num_classes: int,
    blocks: list[int] | None = None,
    prefix_labels: tuple[np.ndarray | None, np.ndarray | None] = (None, None),
    **train_kwargs,
) -> list[tuple[int, float]]:
    """Probe accuracy on ``val`` for each block in ``blocks`` (all blocks by default).

    ``prefix_labels`` feeds class labels to a conditional prior; probes of an
    unconditional prior leave them ``None``.
    """
    blocks = list(range(config.blocks)) if blocks is None else blocks
    for b in blocks:
        if not 0 <= b < config.blocks:
            raise ConfigError(f"block index {b} outside [0, {config.blocks})")
    tr = extract_all_features(train_ids, prefix_labels[0], params, config)
    va = extract_all_features(val_ids, prefix_labels[1], params, config)
    out = []
    for b in blocks:
        head = probe_train(tr[b], train_labels, num_classes, **train_kwargs)
        out.append((b, probe_eval(head, va[b], val_labels)))
    return out
