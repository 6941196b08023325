"""Optimisation loop, learning-rate schedule, input streams and score fusion."""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .data import preprocess
from .numcore import DimensionError, InputError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    base_lr: float = 0.1
    weight_decay: float = 4e-4
    nesterov_momentum: float = 0.9
    epochs: int = 90
    warmup_epochs: int = 5
    eta_min: float = 1e-4
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise InputError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise InputError("warmup_epochs must lie in [0, epochs)")
        if not self.base_lr > self.eta_min >= 0:
            raise InputError("need base_lr > eta_min >= 0")
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")


class StreamKind(str, enum.Enum):
    JOINT = "joint"
    BONE = "bone"
    JOINT_MOTION = "joint_motion"
    BONE_MOTION = "bone_motion"


DEFAULT_FUSION_WEIGHTS = {
    StreamKind.JOINT: 0.6,
    StreamKind.BONE: 0.6,
    StreamKind.JOINT_MOTION: 0.4,
    StreamKind.BONE_MOTION: 0.4,
}


def lr_at(epoch, cfg):
    """Linear warm-up followed by a single cosine decay down to ``eta_min``."""
    if not 0 <= epoch < cfg.epochs:
        raise InputError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * (epoch + 1) / cfg.warmup_epochs
    span = cfg.epochs - 1 - cfg.warmup_epochs
    p = (epoch - cfg.warmup_epochs) / span if span > 0 else 0.0
    return cfg.eta_min + (cfg.base_lr - cfg.eta_min) * (1 + math.cos(math.pi * p)) / 2


def sgd_step(params, grads, lr, cfg, velocity, decay=None):
    """Nesterov SGD with weight decay folded into the gradient, in place.

    ``params``, ``grads`` and ``velocity`` are same-keyed dicts of arrays;
    ``decay`` optionally maps a key to False to exempt it from weight decay.
    """
    m, wd = cfg.nesterov_momentum, cfg.weight_decay
    for key, p in params.items():
        g = grads[key]
        if np.shape(g) != np.shape(p):
            raise DimensionError(f"{key}: grad {np.shape(g)} vs param {np.shape(p)}")
        if wd and (decay is None or decay.get(key, True)):
            g = g + wd * p
        v = velocity.get(key)
        if v is None:
            v = velocity[key] = np.zeros_like(p)
        v *= m
        v += g
        p -= lr * (g + m * v)
    return params


# ---------------------------------------------------------------------------
# streams


def derive_streams(joint, sk):
    """Joint, bone and frame-difference streams of ``(..., C, T, V)`` data."""
    joint = np.asarray(joint)
    parent = np.asarray(sk.parent)
    bone = joint - joint[..., parent]

    def motion(x):
        m = np.zeros_like(x)
        m[..., :-1, :] = x[..., 1:, :] - x[..., :-1, :]
        return m

    return {
        StreamKind.JOINT: joint,
        StreamKind.BONE: bone,
        StreamKind.JOINT_MOTION: motion(joint),
        StreamKind.BONE_MOTION: motion(bone),
    }


def dual_correlation_channels(x):
    """Append differences of adjacent channels: ``C`` -> ``2C - 1`` channels."""
    x = np.asarray(x)
    c = x.shape[-3]
    if c < 2:
        raise InputError(f"need at least two channels, got {c}")
    diffs = x[..., :-1, :, :] - x[..., 1:, :, :]
    return np.concatenate([x, diffs], axis=-3)


def prepare_inputs(x, sk, stream=StreamKind.JOINT, normalize=True, dual_correlation=False):
    """Raw coordinates -> network input for one stream."""
    if normalize:
        x = preprocess(x, sk)
    x = derive_streams(x, sk)[StreamKind(stream)]
    if dual_correlation:
        x = dual_correlation_channels(x)
    return x


def fuse_scores(scores, weights):
    """Weighted sum of per-stream score matrices and its argmax (ties to the lower class)."""
    scores = [np.asarray(s, dtype=float) for s in scores]
    if not scores:
        raise InputError("nothing to fuse")
    if len(weights) != len(scores):
        raise InputError(f"{len(weights)} weights for {len(scores)} score sets")
    shape = scores[0].shape
    if any(s.shape != shape for s in scores) or len(shape) != 2:
        raise InputError("score matrices must share one (B, K) shape")
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or not np.any(w > 0):
        raise InputError("fusion weights must be non-negative and not all zero")
    fused = sum(wi * s for wi, s in zip(w, scores))
    return fused, fused.argmax(axis=1)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = -1.0
    best_state: dict = None


def accuracy(model, x, y, batch_size):
    if len(x) == 0:
        return float("nan")
    pred = model.predict_proba(x, batch_size).argmax(axis=1)
    return float(np.mean(pred == y))


def snapshot(model):
    state = {k: p.value.copy() for k, p in model.named_parameters()}
    state.update({k: b.copy() for k, b in model.named_buffers()})
    return state


def train_loop(model, train, val, cfg, on_epoch=None):
    """Train ``model`` on ``(x, y)`` arrays; evaluate on ``val`` after each epoch.

    ``train_acc`` is measured after the epoch with the model in eval mode, so
    it can be reproduced from the saved weights.  The returned result holds
    the per-epoch records and the parameter state of the best validation
    epoch (first one on ties).
    """
    x, y = train
    if len(x) == 0:
        raise InputError("training set is empty")
    xv, yv = val
    x = np.asarray(x, dtype=model.dtype)
    xv = np.asarray(xv, dtype=model.dtype)
    named = dict(model.named_parameters())
    values = {k: p.value for k, p in named.items()}
    decay = {k: p.decay for k, p in named.items()}
    velocity = {}
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult()
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        start = time.perf_counter()
        model.train()
        order = rng.permutation(len(x))
        losses, counts = [], []
        for i in range(0, len(x), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            model.zero_grad()
            logits = model.forward(x[idx])
            loss, dlogits = nc.softmax_cross_entropy(logits.astype(np.float64), y[idx])
            if not math.isfinite(loss):
                raise nc.NumericError(f"loss diverged at epoch {epoch}")
            model.backward(dlogits)
            grads = {k: p.grad for k, p in named.items()}
            sgd_step(values, grads, lr, cfg, velocity, decay)
            losses.append(loss)
            counts.append(len(idx))
        train_loss = float(np.dot(losses, counts) / np.sum(counts))
        train_acc = accuracy(model, x, y, cfg.batch_size)
        val_acc = accuracy(model, xv, yv, cfg.batch_size)
        rec = EpochRecord(epoch, lr, train_loss, train_acc, val_acc)
        result.history.append(rec)
        score = val_acc if len(xv) else train_acc
        if score > result.best_val_acc:
            result.best_val_acc, result.best_epoch = score, epoch
            result.best_state = snapshot(model)
        log.info("epoch %d lr %.5f loss %.4f train %.3f val %.3f (%.1fs)", epoch, lr,
                 train_loss, train_acc, val_acc, time.perf_counter() - start)
        if on_epoch is not None:
            on_epoch(rec)
    return result


def metrics_csv(history):
    lines = ["epoch,lr,train_loss,train_acc,val_acc"]
    for r in history:
        lines.append(f"{r.epoch},{r.lr!r},{r.train_loss!r},{r.train_acc!r},{r.val_acc!r}")
    return "\n".join(lines) + "\n"
