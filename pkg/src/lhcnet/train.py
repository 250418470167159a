"""Losses, optimizers, staged training with early stopping, evaluation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import tensor as T
from .backbone import Model, tiny_forward
from .data import AugmentConfig, SplitArrays, TtaPlan, augment, record_rng, tta_predict
from .tensor import ConfigError, GradTape, Tensor, backward

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-7
REJECTION_MARGIN = 1.10


def crossentropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    picked = T.pick(T.log_softmax_rows(logits), labels)
    return -T.mean(picked)


# ---------------------------------------------------------------------------
# optimizers (plain arrays in, plain arrays out)
# ---------------------------------------------------------------------------


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    return {k: p - lr * grads[k] if k in grads else p for k, p in params.items()}


def momentum_step(velocity, params, grads, lr: float, momentum: float):
    velocity = {k: momentum * velocity.get(k, 0.0) - lr * g for k, g in grads.items()}
    return velocity, {k: p + velocity[k] if k in velocity else p for k, p in params.items()}


@dataclass(frozen=True)
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    state: AdamState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> tuple[AdamState, dict[str, np.ndarray]]:
    t = state.step + 1
    m = dict(state.m)
    v = dict(state.v)
    out = dict(params)
    for k, g in grads.items():
        m[k] = beta1 * m.get(k, 0.0) + (1 - beta1) * g
        v[k] = beta2 * v.get(k, 0.0) + (1 - beta2) * g * g
        m_hat = m[k] / (1 - beta1**t)
        v_hat = v[k] / (1 - beta2**t)
        out[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + eps)
    return AdamState(t, m, v), out


class Optimizer:
    """Stateful wrapper around the step functions for one training stage."""

    def __init__(self, kind: str, lr: float, momentum: float = 0.0):
        if kind not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {kind!r}")
        self.kind, self.lr, self.momentum = kind, lr, momentum
        self.adam = AdamState()
        self.velocity: dict = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        if self.kind == "adam":
            self.adam, params = adam_step(self.adam, params, grads, self.lr)
        elif self.momentum:
            self.velocity, params = momentum_step(self.velocity, params, grads, self.lr, self.momentum)
        else:
            params = sgd_step(params, grads, self.lr)
        return params


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StageConfig:
    optimizer: str = "sgd"
    lr: float = 0.01
    batch_size: int = 64
    patience: int = 3
    augment: AugmentConfig = AugmentConfig()
    max_epochs: int = 500
    momentum: float = 0.0
    freeze_backbone: bool = False

    def __post_init__(self):
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError(f"patience, batch size and max epochs must be >= 1: {self}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


def standard_stages() -> list[StageConfig]:
    """Stages 1-3 train the host network, stage 4 trains with the LHC blocks."""
    return [
        StageConfig("adam", 1e-4, 48, 30, AugmentConfig(rotation_deg=30)),
        StageConfig("sgd", 0.01, 64, 10, AugmentConfig(rotation_deg=10, shift_frac=0.1, zoom_frac=0.1)),
        StageConfig("sgd", 0.01, 64, 5),
        StageConfig("sgd", 0.01, 64, 3),
    ]


@dataclass
class Dataset:
    """Float images ``(N, H, W, C)`` scaled to [0, 1] and integer labels."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_split(cls, split: SplitArrays) -> "Dataset":
        return cls(split.images.astype(np.float64) / 255.0, split.labels.astype(np.int64))


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float


@dataclass
class StageHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_metric: float = -math.inf
    stopped_early: bool = False

    @property
    def restored(self) -> bool:
        return self.best_epoch != self.records[-1].epoch


class EarlyStopState:
    """Tracks the best metric, its weights and epochs since the last improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.snapshot: dict[str, Tensor] | None = None
        self.since = 0

    def update(self, epoch: int, metric: float, params: dict[str, Tensor]) -> bool:
        """Record one epoch; True when training should stop."""
        if metric > self.best:
            self.best, self.best_epoch, self.snapshot, self.since = metric, epoch, dict(params), 0
        else:
            self.since += 1
        return self.since >= self.patience


def predict_logits(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    outs = [
        tiny_forward(model, images[i:i + batch_size]).numpy() for i in range(0, len(images), batch_size)
    ]
    return np.concatenate(outs) if outs else np.zeros((0, model.spec.num_classes))


def mean_loss(model: Model, data: Dataset, batch_size: int = 256) -> float:
    logits = predict_logits(model, data.images, batch_size)
    return crossentropy(Tensor(logits), data.labels).item()


def accuracy(model: Model, data: Dataset) -> float:
    return float((predict_logits(model, data.images).argmax(axis=1) == data.labels).mean())


def _trainable(model: Model, freeze_backbone: bool) -> list[str]:
    names = []
    for name in model.params:
        if name.startswith("block"):
            index = int(name.split(".")[0][5:])
            if not model.enabled[index - 1]:
                continue
        elif freeze_backbone:
            continue
        names.append(name)
    return names


def train_step(model: Model, xb: np.ndarray, yb: np.ndarray, opt: Optimizer, names: list[str]) -> tuple[Model, float]:
    with GradTape() as tape:
        loss = crossentropy(tiny_forward(model, xb), yb)
    grads = backward(tape, loss, [model.params[n] for n in names])
    arrays = {n: model.params[n].data for n in names}
    updated = opt.step(arrays, dict(zip(names, grads)))
    dtype = next(iter(model.params.values())).precision
    params = dict(model.params)
    params.update({n: Tensor(a, dtype) for n, a in updated.items()})
    return model.with_params(params), loss.item()


def _augmented_batch(data: Dataset, idx: np.ndarray, cfg: AugmentConfig, seed: int, epoch: int) -> np.ndarray:
    if cfg.is_identity:
        return data.images[idx]
    return np.stack(
        [augment(data.images[i], cfg, record_rng(seed, cfg.seed, epoch, int(i))) for i in idx]
    )


def run_stage(
    model: Model,
    train: Dataset,
    val: Dataset,
    cfg: StageConfig,
    seed: int = 0,
    metric: Callable[[Model], float] | None = None,
) -> tuple[Model, StageHistory]:
    """Epoch loop with early stopping on validation accuracy.

    Epoch 0 records the untrained model, so a stage that never improves
    returns its input weights. The returned model carries the best weights.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    metric = metric or (lambda m: accuracy(m, val))
    names = _trainable(model, cfg.freeze_backbone)
    opt = Optimizer(cfg.optimizer, cfg.lr, cfg.momentum)
    history = StageHistory()
    stopper = EarlyStopState(cfg.patience)
    first = metric(model)
    history.records.append(EpochRecord(0, mean_loss(model, train), first))
    stopper.update(0, first, model.params)
    for epoch in range(1, cfg.max_epochs + 1):
        order = record_rng(seed, epoch).permutation(len(train))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = _augmented_batch(train, idx, cfg.augment, seed, epoch)
            model, loss = train_step(model, xb, train.labels[idx], opt, names)
            total += loss * len(idx)
        value = metric(model)
        history.records.append(EpochRecord(epoch, total / len(train), value))
        if stopper.update(epoch, value, model.params):
            history.stopped_early = True
            break
    history.best_epoch, history.best_metric = stopper.best_epoch, stopper.best
    return model.with_params(stopper.snapshot), history


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    divergent: bool = False


def rejection_check(trained_loss: float, base_loss: float) -> Verdict:
    """Keep a model whose loss stays below the host's loss plus 10%."""
    if not math.isfinite(base_loss):
        raise ValueError(f"base loss must be finite, got {base_loss}")
    if not math.isfinite(trained_loss):
        return Verdict(False, divergent=True)
    return Verdict(trained_loss < base_loss * REJECTION_MARGIN)


@dataclass
class ProtocolResult:
    model: Model
    stages: list[StageHistory]
    base_loss: float
    final_loss: float
    verdict: Verdict


def run_protocol(
    model: Model,
    train: Dataset,
    val: Dataset,
    stages: list[StageConfig],
    seed: int = 0,
) -> ProtocolResult:
    """Train the host with LHC blocks off, then the last stage with them on."""
    if not stages:
        raise ConfigError("protocol needs at least one stage")
    enabled = model.enabled
    host = replace(model, enabled=(False,) * len(enabled))
    histories = []
    for k, cfg in enumerate(stages[:-1], start=1):
        host, hist = run_stage(host, train, val, cfg, seed=seed + k)
        histories.append(hist)
    base_loss = mean_loss(host, train)
    full = replace(host, enabled=enabled)
    full, hist = run_stage(full, train, val, stages[-1], seed=seed + len(stages))
    histories.append(hist)
    final_loss = mean_loss(full, train)
    return ProtocolResult(full, histories, base_loss, final_loss, rejection_check(final_loss, base_loss))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    probabilities: np.ndarray


def evaluate(model: Model, data: Dataset, tta: TtaPlan | None = None) -> EvalResult:
    """Accuracy and confusion matrix (rows: true class, columns: predicted)."""
    if len(data) == 0:
        raise ValueError("empty evaluation split")
    k = model.spec.num_classes
    if tta is None:
        logits = predict_logits(model, data.images)
        z = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        preds = logits.argmax(axis=1)
    else:
        probs, preds = tta_predict(lambda b: predict_logits(model, b), data.images, tta)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (data.labels, preds), 1)
    return EvalResult(float((preds == data.labels).mean()), confusion, probs)


def history_csv(histories: list[StageHistory]) -> str:
    """Columns ``stage,epoch,train_loss,val_accuracy``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["stage", "epoch", "train_loss", "val_accuracy"])
    for s, hist in enumerate(histories, start=1):
        for r in hist.records:
            writer.writerow([s, r.epoch, f"{r.train_loss:.10g}", f"{r.val_accuracy:.10g}"])
    return buf.getvalue()
