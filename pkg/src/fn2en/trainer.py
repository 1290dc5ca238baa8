"""Two-stage training: teacher feature regression, then joint cross-entropy refinement."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from decimal import Decimal

import numpy as np

from .checkpoint import load_network, save_network
from .data import AugmentPolicy, augment_batch
from .errors import ConfigError, ContractError, DataError, NumericError
from .losses import RegressionLossConfig, cross_entropy, regression_loss
from .tensor import backward, no_grad


@dataclass(frozen=True)
class TrainSchedule:
    stage: int = 2
    base_lr: float = 1e-4
    lr_decay_steps: tuple = (20,)
    lr_decay_factor: float = 0.1
    total_epochs: int = 50
    batch_size: int = 64
    momentum: float = 0.9
    dropout_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_steps", tuple(int(s) for s in self.lr_decay_steps))
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if not self.base_lr > 0 or not self.lr_decay_factor > 0:
            raise ConfigError("learning rate and decay factor must be positive")
        if self.total_epochs < 0 or self.batch_size < 1:
            raise ConfigError("total_epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {self.dropout_rate}")

    @classmethod
    def stage1_defaults(cls, **overrides):
        return cls(**{**dict(stage=1, base_lr=1e-7, lr_decay_steps=(100,), lr_decay_factor=0.1, total_epochs=300), **overrides})

    @classmethod
    def stage2_defaults(cls, **overrides):
        return cls(**{**dict(stage=2, base_lr=1e-4, lr_decay_steps=(20,), lr_decay_factor=0.1, total_epochs=50), **overrides})

    def with_overrides(self, **kw):
        return replace(self, **kw)


def lr_at(schedule, epoch):
    """``base_lr * factor ** (#decay steps reached)``, evaluated in decimal so 1e-4 * 0.1 ** 2 is exactly 1e-6."""
    if not 0 <= epoch < schedule.total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    passed = sum(1 for step in schedule.lr_decay_steps if epoch >= step)
    return float(Decimal(repr(schedule.base_lr)) * Decimal(repr(schedule.lr_decay_factor)) ** passed)


def sgd_step(params, grads, velocities, lr, momentum):
    """Classical momentum in place: ``v = momentum * v + g; p -= lr * v``.

    All gradients are checked before any parameter moves.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NumericError(f"non-finite gradient for {name}: {bad} bad entries; training aborted")
    for name, p in params.items():
        g = grads.get(name)
        v = velocities.get(name)
        if v is None:
            v = velocities[name] = np.zeros_like(p)
        v *= momentum
        if g is not None:
            v += g
        p -= p.dtype.type(lr) * v
    return velocities


@dataclass
class TrainState:
    """Everything needed to continue a run bit-exactly from an epoch boundary."""

    stage: int
    seed: int
    epoch: int = 0
    step: int = 0
    velocities: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def rng(self, epoch):
        # batch order, crops and dropout masks are a pure function of (seed, stage, epoch)
        return np.random.default_rng([self.seed, self.stage, epoch])

    def to_provenance(self):
        return {"stage": self.stage, "seed": self.seed, "epoch": self.epoch, "step": self.step,
                "history": self.history}

    @classmethod
    def from_provenance(cls, info, velocities):
        return cls(info["stage"], info["seed"], info["epoch"], info["step"], dict(velocities), list(info["history"]))


@dataclass
class TrainResult:
    network: object
    history: list
    state: TrainState


def save_training(path, net, state, provenance=None):
    extra = {f"velocity/{k}": v for k, v in state.velocities.items()}
    prov = dict(provenance or {}, train_state=state.to_provenance())
    save_network(net, path, prov, extra)


def load_training(path):
    net, prov, extras = load_network(path)
    velocities = {k[len("velocity/"):]: v for k, v in extras.items() if k.startswith("velocity/")}
    if "train_state" not in prov:
        raise ConfigError(f"{path} carries no training state to resume from")
    return net, TrainState.from_provenance(prov["train_state"], velocities), prov


def default_policy(image_shape, input_size):
    size = image_shape[-1]
    return AugmentPolicy(canonical_size=size, crop_size=input_size)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _run(net, schedule, state, n, batch_loss, until_epoch, on_epoch, evaluate=None):
    params = {name: t.data for name, t in net.trainable()}
    stop = schedule.total_epochs if until_epoch is None else min(until_epoch, schedule.total_epochs)
    while state.epoch < stop:
        epoch = state.epoch
        started = time.perf_counter()
        lr = lr_at(schedule, epoch)
        rng = state.rng(epoch)
        total, seen = 0.0, 0
        for batch in _batches(n, schedule.batch_size, rng):
            loss = batch_loss(batch, rng)
            value = float(loss.item())
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {state.step}")
            net.zero_grad()
            backward(loss)
            grads = {name: t.grad for name, t in net.trainable() if t.grad is not None}
            sgd_step(params, grads, state.velocities, lr, schedule.momentum)
            state.step += 1
            total += value * len(batch)
            seen += len(batch)
        row = {"stage": schedule.stage, "epoch": epoch, "lr": lr, "loss": total / max(seen, 1)}
        if evaluate is not None:
            row["accuracy"] = evaluate()
        row["seconds"] = time.perf_counter() - started
        state.history.append(row)
        state.epoch = epoch + 1
        if on_epoch is not None:
            on_epoch(row)
    net.zero_grad()
    return TrainResult(net, state.history, state)


def check_stage1_shapes(student, teacher, tap):
    got = student.shapes()[student.feature_layer]
    want = teacher.tap_shape(tap, student.input_shape)
    if tuple(got) != tuple(want):
        raise ConfigError(
            f"student features {got} do not match teacher tap {tap!r} {want}; "
            "build the student with teacher_shape to insert a deconvolution upsampler"
        )


def train_stage1(student, teacher, dataset, schedule, loss_cfg=None, *, tap, policy=None,
                 indices=None, state=None, until_epoch=None, on_epoch=None):
    """Regress the student trunk onto frozen teacher features; labels are never read.

    Only the student's trunk parameters move.  The teacher sees exactly the
    augmented batch the student sees.
    """
    if student.has_head:
        raise ContractError("stage 1 trains the convolutional trunk only; detach the head first")
    loss_cfg = loss_cfg or RegressionLossConfig()
    check_stage1_shapes(student, teacher, tap)
    policy = policy or default_policy(dataset.image_shape, student.input_shape[-1])
    images = dataset.inputs(indices)
    state = state or TrainState(1, schedule.seed)

    def batch_loss(batch, rng):
        x = augment_batch(images[batch], policy, rng, train=True)
        target = teacher.features(x, tap)
        return regression_loss(student.features(x, train=True, rng=rng), target, loss_cfg)

    return _run(student, schedule, state, len(images), batch_loss, until_epoch, on_epoch)


def regression_eval(student, teacher, dataset, tap, loss_cfg=None, policy=None, indices=None, batch_size=64):
    """Mean-per-image regression loss over a dataset with eval-mode centre crops."""
    loss_cfg = replace(loss_cfg or RegressionLossConfig(), reduction="sum")
    policy = policy or default_policy(dataset.image_shape, student.input_shape[-1])
    images = dataset.inputs(indices)
    total = 0.0
    with no_grad():
        for i in range(0, len(images), batch_size):
            x = augment_batch(images[i : i + batch_size], policy, train=False)
            total += float(regression_loss(student.features(x), teacher.features(x, tap), loss_cfg).item())
    return total / len(images)


def predict_logits(net, images, policy, batch_size=128):
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            x = augment_batch(images[i : i + batch_size], policy, train=False)
            out.append(net(x).data)
    return np.concatenate(out)


def train_classifier(net, images, targets, schedule, *, policy, state=None, eval_images=None,
                     eval_targets=None, until_epoch=None, on_epoch=None):
    """Cross-entropy SGD over every trainable parameter of ``net``."""
    if not net.has_head:
        raise ContractError("attach a classification head before training with labels")
    targets = np.asarray(targets, dtype=np.int64)
    num_classes = net.layers[-1]["out"]
    bad = np.flatnonzero((targets < 0) | (targets >= num_classes))
    if bad.size:
        raise DataError(f"labels outside [0, {num_classes})", [f"index {i}: {targets[i]}" for i in bad[:10]])
    for layer in net.layers:
        if layer["kind"] == "dropout":
            layer["rate"] = schedule.dropout_rate
    state = state or TrainState(schedule.stage, schedule.seed)

    def batch_loss(batch, rng):
        x = augment_batch(images[batch], policy, rng, train=True)
        return cross_entropy(net(x, train=True, rng=rng), targets[batch])

    evaluate = None
    if eval_images is not None and len(eval_images):
        def evaluate():
            pred = predict_logits(net, eval_images, policy).argmax(axis=1)
            return float(np.mean(pred == eval_targets))

    return _run(net, schedule, state, len(images), batch_loss, until_epoch, on_epoch, evaluate)


def train_stage2(net, dataset, schedule, *, train_indices=None, eval_indices=None, policy=None,
                 state=None, until_epoch=None, on_epoch=None):
    """Jointly train trunk and head with cross-entropy; no teacher is involved."""
    policy = policy or default_policy(dataset.image_shape, net.input_shape[-1])
    labels = dataset.labels
    train_indices = np.arange(len(dataset)) if train_indices is None else np.asarray(train_indices)
    kwargs = {}
    if eval_indices is not None:
        kwargs = dict(eval_images=dataset.inputs(eval_indices), eval_targets=labels[eval_indices])
    return train_classifier(net, dataset.inputs(train_indices), labels[train_indices], schedule,
                            policy=policy, state=state, until_epoch=until_epoch, on_epoch=on_epoch, **kwargs)
