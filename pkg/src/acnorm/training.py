"""Losses, optimisers, metrics and the pretrain / finetune loops."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .checkpoint import Checkpoint, checkpoint_from_model
from .core import ACNormConfig
from .data import Dataset
from .errors import ConfigError, DataError, DivergenceError
from .model import ArchSpec, ModelGraph, build_model, reinit_head
from .surgery import apply_freeze_policy, swap_norm_layers
from .variants import NormKind

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-2
    optimizer: str = "sgd"
    optimizer_momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    freeze_policy: object = "full_ft"
    norm_kind: str = "vanilla_bn"
    temperature: float = 1.0
    eps: float = 1e-5
    momentum: float = 0.1
    detach_calibration: bool = False
    balanced: bool = False
    loss: str = "bce_dice"
    probe_epochs: list = field(default_factory=list)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.loss not in ("bce", "bce_dice"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        NormKind.parse(self.norm_kind)
        self.norm_config()

    def norm_config(self) -> ACNormConfig:
        return ACNormConfig(self.temperature, self.eps, self.detach_calibration, self.momentum)

    def to_dict(self):
        return asdict(self)


@dataclass
class MetricsRecord:
    dice: float | None = None
    accuracy: float | None = None
    auc: float | None = None
    loss_curve: list = field(default_factory=list)
    calibration_snapshots: dict = field(default_factory=dict)

    def summary(self):
        return {k: v for k, v in (("dice", self.dice), ("accuracy", self.accuracy), ("auc", self.auc))
                if v is not None}


# losses


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy and its gradient w.r.t. the logits."""
    z = logits.astype(np.float64)
    loss = np.mean(np.maximum(z, 0) - z * targets + np.log1p(np.exp(-np.abs(z))))
    grad = (1.0 / (1.0 + np.exp(-z)) - targets) / z.size
    return loss, grad.astype(logits.dtype)


def softmax_cross_entropy(logits, labels):
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    n = len(labels)
    loss = -np.mean(np.log(p[np.arange(n), labels] + 1e-300))
    p[np.arange(n), labels] -= 1.0
    return loss, (p / n).astype(logits.dtype)


def soft_dice_loss(logits, targets, smooth=1.0):
    """``1 - mean per-image soft Dice`` on sigmoid probabilities, with its logit gradient."""
    z = logits.astype(np.float64)
    p = 1.0 / (1.0 + np.exp(-z))
    n = len(z)
    pf, tf = p.reshape(n, -1), targets.reshape(n, -1).astype(np.float64)
    inter = np.sum(pf * tf, axis=1)
    denom = pf.sum(axis=1) + tf.sum(axis=1) + smooth
    dice = (2 * inter + smooth) / denom
    d_p = -(2 * tf * denom[:, None] - (2 * inter + smooth)[:, None]) / denom[:, None] ** 2 / n
    grad = d_p * (pf * (1 - pf))
    return float(1.0 - dice.mean()), grad.reshape(z.shape).astype(logits.dtype)


def task_loss(task, logits, targets, kind="bce"):
    if task == "segmentation":
        loss, grad = bce_with_logits(logits, targets)
        if kind == "bce_dice":
            d_loss, d_grad = soft_dice_loss(logits, targets)
            loss, grad = loss + d_loss, grad + d_grad
        return loss, grad
    return softmax_cross_entropy(logits, targets)


# optimisers


class SGD:
    def __init__(self, lr, momentum=0.9, weight_decay=0.0):
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = {}

    def step(self, params, grads):
        for name, g in grads.items():
            p = params[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            p -= (self.lr * v).astype(p.dtype)


class Adam:
    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.betas
        for name, g in grads.items():
            p = params[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            m = b1 * self.m.get(name, 0.0) + (1 - b1) * g
            v = b2 * self.v.get(name, 0.0) + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            step = self.lr * (m / (1 - b1 ** self.t)) / (np.sqrt(v / (1 - b2 ** self.t)) + self.eps)
            p -= step.astype(p.dtype)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(config.learning_rate, weight_decay=config.weight_decay)
    return SGD(config.learning_rate, config.optimizer_momentum, config.weight_decay)


# metrics


def dice_score(pred, target):
    """Mean per-image Dice of binary masks; an image with both masks empty scores 1."""
    pred = pred.reshape(len(pred), -1).astype(bool)
    target = target.reshape(len(target), -1).astype(bool)
    inter = np.sum(pred & target, axis=1)
    total = pred.sum(axis=1) + target.sum(axis=1)
    per = np.where(total == 0, 1.0, 2.0 * inter / np.maximum(total, 1))
    return float(per.mean())


def binary_auc(scores, labels):
    """Area under the ROC curve from the Mann-Whitney rank statistic (ties averaged)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def predict(model: ModelGraph, images, batch_size=32):
    outs = [model.forward(images[i:i + batch_size], training=False) for i in range(0, len(images), batch_size)]
    return np.concatenate(outs, axis=0)


def evaluate(model: ModelGraph, dataset: Dataset, task=None) -> MetricsRecord:
    task = task or dataset.task
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    if task != model.arch.task or task != dataset.task:
        raise DataError(f"task mismatch: model {model.arch.task}, dataset {dataset.task}, requested {task}")
    logits = predict(model, dataset.images).astype(np.float64)
    if task == "segmentation":
        prob = 1.0 / (1.0 + np.exp(-logits))
        pred = prob >= 0.5
        target = dataset.labels >= 0.5
        return MetricsRecord(
            dice=dice_score(pred, target),
            accuracy=float(np.mean(pred == target)),
            auc=binary_auc(prob, target),
        )
    z = logits - logits.max(axis=1, keepdims=True)
    prob = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    labels = dataset.labels
    acc = float(np.mean(prob.argmax(axis=1) == labels))
    if prob.shape[1] == 2:
        auc = binary_auc(prob[:, 1], labels == 1)
    else:
        aucs = [binary_auc(prob[:, c], labels == c) for c in range(prob.shape[1])]
        aucs = [a for a in aucs if not np.isnan(a)]
        auc = float(np.mean(aucs)) if aucs else float("nan")
    return MetricsRecord(accuracy=acc, auc=auc)


# loops


def _epoch_order(dataset: Dataset, config: TrainConfig, epoch):
    rng = np.random.default_rng([config.seed, epoch, 0xE90C])
    n = len(dataset)
    if config.balanced and dataset.task == "classification":
        classes = np.unique(dataset.labels)
        per = int(np.bincount(dataset.labels).max())
        parts = [rng.choice(np.flatnonzero(dataset.labels == c), per, replace=True) for c in classes]
        order = np.concatenate(parts)
        return order[rng.permutation(len(order))]
    return rng.permutation(n)


def snapshot_calibration(model: ModelGraph):
    return {layer.name: layer.current_calibration() for layer in model.norm_layers()
            if layer.norm_kind is not NormKind.VANILLA_BN}


def train(model: ModelGraph, dataset: Dataset, config: TrainConfig, epochs=None, optimizer=None,
          record: MetricsRecord | None = None):
    """Minibatch training on a ``train`` split; returns the loss per epoch."""
    dataset.require_split("train")
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    epochs = config.epochs if epochs is None else epochs
    optimizer = optimizer or make_optimizer(config)
    record = record if record is not None else MetricsRecord()
    bs = config.batch_size
    for epoch in range(epochs):
        order = _epoch_order(dataset, config, epoch)
        losses, counts = [], []
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            if len(idx) < 2:
                continue
            x = dataset.images[idx]
            y = dataset.labels[idx]
            logits = model.forward(x, training=True)
            loss, grad = task_loss(dataset.task, logits, y, config.loss)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            grads = model.backward(grad)
            optimizer.step(model.parameters(), grads)
            bad = [n for n, a in model.parameters().items() if not np.all(np.isfinite(a))]
            if bad:
                raise DivergenceError(f"non-finite parameters after epoch {epoch} step at {start}: {bad[:3]}")
            losses.append(loss)
            counts.append(len(idx))
        mean_loss = float(np.average(losses, weights=counts))
        record.loss_curve.append(mean_loss)
        log.info("epoch %d/%d loss %.5f", epoch + 1, epochs, mean_loss)
        if epoch + 1 in config.probe_epochs:
            record.calibration_snapshots[epoch + 1] = snapshot_calibration(model)
    return record


def pretrain(datasets, arch: ArchSpec, config: TrainConfig) -> tuple[Checkpoint, MetricsRecord]:
    """Train a plain-BN network from random init on the source task."""
    model = build_model(arch, config.seed, NormKind.VANILLA_BN, config.norm_config())
    record = MetricsRecord()
    if config.epochs:
        train(model, datasets["train"], config, record=record)
    ckpt = checkpoint_from_model(model, config.seed, role="pretrained", epochs=config.epochs)
    return ckpt, record


def assemble_target(ckpt: Checkpoint | None, arch: ArchSpec, config: TrainConfig) -> ModelGraph:
    """Target network: transferred body from ``ckpt`` (or random init), fresh head, norm swap, freezing."""
    if isinstance(arch, dict):
        arch = ArchSpec(**arch)
    base = build_model(arch, config.seed, NormKind.VANILLA_BN, config.norm_config())
    reinit_head(base, config.seed)
    if ckpt is None:
        ckpt = checkpoint_from_model(base, config.seed)
    model = swap_norm_layers(base, ckpt, config.norm_kind, config.norm_config())
    apply_freeze_policy(model, config.freeze_policy)
    return model


def finetune(ckpt: Checkpoint | None, datasets, arch: ArchSpec, config: TrainConfig):
    """Fine-tune on the target task; returns ``(checkpoint, metrics on the test split)``."""
    model = assemble_target(ckpt, arch, config)
    record = MetricsRecord()
    if 0 in config.probe_epochs:
        record.calibration_snapshots[0] = snapshot_calibration(model)
    if config.epochs:
        train(model, datasets["train"], config, record=record)
    test = datasets["test"]
    test.require_split("test")
    result = evaluate(model, test)
    result.loss_curve = record.loss_curve
    result.calibration_snapshots = record.calibration_snapshots
    out = checkpoint_from_model(model, config.seed, role="finetuned", epochs=config.epochs)
    return out, result
