"""Loss, schedule, optimizer, metrics, and the deterministic training loop.

Training follows a fixed recipe: per-pixel cross entropy with an ignore
label, SGD with classical momentum and decoupled-into-the-gradient weight
decay, a linear learning-rate warmup followed by piecewise-constant phases,
and horizontal flip augmentation.  All randomness (batch order, flips) comes
from one generator seeded by the config, so runs with equal seeds produce
bitwise-identical loss histories.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from rsphead.tensor import ShapeError, Tensor, backward, log_softmax, mul, no_grad, reduce_sum

__all__ = [
    "TrainConfig",
    "OptState",
    "TrainingDiverged",
    "cross_entropy",
    "lr_at_step",
    "sgd_momentum_step",
    "ConfusionMatrix",
    "miou",
    "evaluate",
    "train_steps",
]

IGNORE_INDEX = 255


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters.

    ``schedule`` is a tuple of ``(steps, lr)`` phases laid end to end from
    step 0; the warmup overrides the phase rate for the first
    ``warmup_steps`` steps, interpolating linearly from ``warmup_start_lr``
    to ``base_lr``.  An empty schedule means one phase at ``base_lr``.
    """

    total_steps: int = 2000
    batch_size: int = 8
    base_lr: float = 0.01
    warmup_start_lr: float = 0.001
    warmup_steps: int = 100
    schedule: tuple = ()
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    hflip: bool = True
    eval_every: int = 0
    log_every: int = 50
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        if self.total_steps < 0:
            raise ValueError(f"total_steps must be >=0, got {self.total_steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >=1, got {self.batch_size}")
        if self.base_lr <= 0 or self.warmup_start_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.warmup_steps < 0:
            raise ValueError(f"warmup_steps must be >=0, got {self.warmup_steps}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >=0, got {self.weight_decay}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        for phase in self.schedule:
            if len(phase) != 2 or phase[0] < 1 or phase[1] <= 0:
                raise ValueError(f"schedule phases need positive (steps, lr), got {phase}")

    @property
    def phases(self) -> tuple:
        if self.schedule:
            return tuple((int(n), float(lr)) for n, lr in self.schedule)
        return ((max(self.total_steps, 1), self.base_lr),)


def lr_at_step(step: int, cfg: TrainConfig) -> float:
    """Learning rate at an (0-based) update step."""
    if step < 0:
        raise ValueError(f"step must be >=0, got {step}")
    if step < cfg.warmup_steps:
        frac = step / cfg.warmup_steps
        return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * frac
    edge = 0
    for count, lr in cfg.phases:
        edge += count
        if step < edge:
            return lr
    return cfg.phases[-1][1]


def cross_entropy(scores: Tensor, labels, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean per-pixel cross entropy; pixels labeled ``ignore_index`` drop out.

    ``scores`` is [B,K,H,W]; ``labels`` an integer [B,H,W] array.  When every
    pixel is ignored the loss is the constant 0 with no gradient.
    """
    labels = np.asarray(labels)
    if scores.ndim != 4:
        raise ShapeError(f"expected [B,K,H,W] scores, got {scores.shape}")
    b, k, h, w = scores.shape
    if labels.shape != (b, h, w):
        raise ShapeError(f"labels {labels.shape} do not match scores {scores.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise TypeError(f"labels must be integers, got dtype {labels.dtype}")
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        first = labels[bad].reshape(-1)[0]
        raise ValueError(f"label {first} out of range for {k} classes")
    n = int(valid.sum())
    if n == 0:
        return Tensor(0.0)
    log_probs = log_softmax(scores, axis=1)
    onehot = np.zeros(scores.shape)
    bi, hi, wi = np.nonzero(valid)
    onehot[bi, labels[bi, hi, wi], hi, wi] = 1.0
    return mul(reduce_sum(mul(log_probs, Tensor(onehot))), -1.0 / n)


@dataclass
class OptState:
    """Per-parameter momentum buffers plus the update counter."""

    velocity: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    step: int = 0

    @classmethod
    def for_params(cls, params: Mapping) -> "OptState":
        vel = OrderedDict((n, np.zeros_like(t.data)) for n, t in params.items())
        return cls(velocity=vel)


def sgd_momentum_step(params: Mapping, grads: Mapping, opt: OptState, lr: float,
                      momentum: float, weight_decay: float) -> None:
    """One classical-momentum update, in place.

    For each parameter: ``g = grad + weight_decay * param``,
    ``v = momentum * v + g``, ``param -= lr * v``.
    """
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    for name, p in params.items():
        g = grads[name]
        if g is None:
            raise ValueError(f"parameter '{name}' has no gradient")
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter '{name}' {p.data.shape}")
        v = opt.velocity.get(name)
        if v is None:
            v = opt.velocity[name] = np.zeros_like(p.data)
        g_eff = g + weight_decay * p.data if weight_decay else g
        v *= momentum
        v += g_eff
        p.data -= lr * v
    opt.step += 1


class ConfusionMatrix:
    """Accumulated class confusion counts; rows are true, columns predicted."""

    def __init__(self, num_classes: int, ignore_index: int = IGNORE_INDEX):
        if num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {num_classes}")
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, true, pred) -> None:
        true = np.asarray(true)
        pred = np.asarray(pred)
        if true.shape != pred.shape:
            raise ShapeError(f"label arrays differ in shape: {true.shape} vs {pred.shape}")
        keep = true != self.ignore_index
        t = true[keep].astype(np.int64).reshape(-1)
        p = pred[keep].astype(np.int64).reshape(-1)
        k = self.num_classes
        if t.size and (t.min() < 0 or t.max() >= k):
            raise ValueError(f"true label out of range for {k} classes")
        if p.size and (p.min() < 0 or p.max() >= k):
            raise ValueError(f"predicted label out of range for {k} classes")
        self.counts += np.bincount(t * k + p, minlength=k * k).reshape(k, k)


def miou(cm: ConfusionMatrix) -> float:
    """Mean over classes of intersection / union.

    A class absent from both the true and the predicted labels has an empty
    union and is excluded from the mean.
    """
    counts = cm.counts
    inter = np.diag(counts).astype(np.float64)
    union = counts.sum(axis=0) + counts.sum(axis=1) - np.diag(counts)
    seen = union > 0
    if not seen.any():
        raise ValueError("no class was ever seen; mIoU is undefined")
    return float(np.mean(inter[seen] / union[seen]))


def evaluate(model, samples: Sequence, num_classes: int,
             ignore_index: int = IGNORE_INDEX, batch_size: int = 8) -> float:
    """mIoU of ``model`` over ``samples``."""
    from rsphead.pyramid import predict

    if not samples:
        raise ValueError("empty evaluation dataset")
    cm = ConfusionMatrix(num_classes, ignore_index)
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            images = Tensor(np.stack([s.image for s in chunk]))
            labels = np.stack([s.labels for s in chunk])
            cm.update(labels, predict(model.forward(images)))
    return miou(cm)


def train_steps(model, dataset: Sequence, cfg: TrainConfig,
                eval_dataset: Sequence | None = None,
                log: Callable[[str], None] | None = None,
                num_classes: int | None = None) -> list:
    """Run ``cfg.total_steps`` updates of ``model`` on ``dataset``.

    Returns the history as a list of ``(step, loss, lr)`` tuples; the model
    parameters are updated in place.  Batch composition and flips are drawn
    from a generator seeded with ``cfg.seed``, so the history is bitwise
    reproducible.  ``log`` receives formatted metric lines; when an
    ``eval_dataset`` is given and ``cfg.eval_every > 0``, periodic lines also
    carry the evaluation mIoU.
    """
    if not dataset:
        raise ValueError("empty training dataset")
    params = model.parameters()
    opt = OptState.for_params(params)
    rng = np.random.default_rng(cfg.seed)
    order: np.ndarray = np.empty(0, dtype=np.int64)
    cursor = 0
    history = []

    for step in range(cfg.total_steps):
        picks = []
        for _ in range(cfg.batch_size):
            if cursor >= order.size:
                order = rng.permutation(len(dataset))
                cursor = 0
            picks.append(int(order[cursor]))
            cursor += 1
        images = np.stack([dataset[i].image for i in picks]).astype(np.float64)
        labels = np.stack([dataset[i].labels for i in picks])
        if cfg.hflip:
            flips = rng.random(cfg.batch_size) < 0.5
            for j in np.nonzero(flips)[0]:
                images[j] = images[j, :, :, ::-1]
                labels[j] = labels[j, :, ::-1]

        lr = lr_at_step(step, cfg)
        model.zero_grad()
        loss = cross_entropy(model.forward(Tensor(images)), labels, cfg.ignore_index)
        loss_val = float(loss.data.reshape(-1)[0])
        if not math.isfinite(loss_val):
            raise TrainingDiverged(f"non-finite loss {loss_val} at step {step} (lr={lr:g})")
        backward(loss)
        sgd_momentum_step(params, {n: t.grad for n, t in params.items()}, opt, lr,
                          cfg.momentum, cfg.weight_decay)
        history.append((step, loss_val, lr))

        if log is not None:
            last = step == cfg.total_steps - 1
            due_log = cfg.log_every > 0 and step % cfg.log_every == 0
            due_eval = (eval_dataset is not None and cfg.eval_every > 0
                        and ((step + 1) % cfg.eval_every == 0 or last))
            if due_eval:
                k = num_classes if num_classes is not None else model.config.num_classes
                score = evaluate(model, eval_dataset, k, cfg.ignore_index, cfg.batch_size)
                log(f"step={step} lr={lr:.6f} loss={loss_val:.6f} miou={score:.4f}")
            elif due_log or last:
                log(f"step={step} lr={lr:.6f} loss={loss_val:.6f}")
    return history
