"""Adam optimisation and the epoch loop for the transformer."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from ..features import ManifestMismatchError
from .model import Batch, TransformerConfig, forward, init_params, loss_and_grads

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class DivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 50
    validation_split: float = 0.2
    patience: int | None = 5
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    history: dict[str, list] = field(default_factory=lambda: {
        "train_loss": [], "train_acc": [], "val_loss": [], "val_acc": []})
    best_epoch: int | None = None

    @classmethod
    def fresh(cls, params: dict) -> "TrainState":
        return cls(params, {k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(state: TrainState, grads: dict, learning_rate: float = 1e-3,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPS) -> TrainState:
    """Bias-corrected Adam update, applied in place; returns ``state``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        state.params[name] -= learning_rate * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class EarlyStopping:
    """Tracks validation loss; ``update`` returns True once ``patience``
    consecutive epochs have failed to improve on the best value."""

    def __init__(self, patience: int | None):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = None
        self.bad_epochs = 0

    def update(self, epoch: int, loss: float) -> bool:
        if loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = loss, epoch, 0
            return False
        self.bad_epochs += 1
        return self.patience is not None and self.bad_epochs >= self.patience


def evaluate_batch(batch: Batch, labels, params, config: TransformerConfig,
                   chunk: int = 512) -> tuple[float, float]:
    """Eval-mode mean cross-entropy and accuracy."""
    labels = np.asarray(labels)
    nll, correct = 0.0, 0
    for start in range(0, len(batch), chunk):
        idx = slice(start, start + chunk)
        probs = forward(batch.take(idx), params, config)
        y = labels[idx]
        nll -= np.log(np.maximum(probs[np.arange(len(y)), y], 1e-300)).sum()
        correct += int((probs.argmax(axis=1) == y).sum())
    n = len(batch)
    return nll / n, correct / n


def fit_arrays(train: Batch, y_train, config: TransformerConfig,
               train_config: TrainConfig, validation: Batch | None = None,
               y_val=None, state: TrainState | None = None) -> TrainState:
    """Run the epoch loop on pre-built batches.

    With a non-empty validation set, the best-validation-loss parameters are
    restored at the end and training stops early after ``patience`` epochs
    without improvement.
    """
    y_train = np.asarray(y_train, dtype=np.int64)
    if len(train) == 0:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(train_config.seed)
    if state is None:
        state = TrainState.fresh(init_params(config, int(rng.integers(2**31))))
    has_val = validation is not None and len(validation) > 0
    stopper = EarlyStopping(train_config.patience if has_val else None)
    best_params = None
    n = len(train)
    bs = train_config.batch_size

    for epoch in range(train_config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start: start + bs]
            batch = train.take(idx)
            try:
                _, grads = loss_and_grads(batch, y_train[idx], state.params, config,
                                          train_mode=True, rng=rng)
            except FloatingPointError as exc:
                raise DivergedError(f"epoch {epoch}: {exc}") from exc
            adam_step(state, grads, train_config.learning_rate)
        train_loss, train_acc = evaluate_batch(train, y_train, state.params, config)
        state.history["train_loss"].append(train_loss)
        state.history["train_acc"].append(train_acc)
        if has_val:
            val_loss, val_acc = evaluate_batch(validation, y_val, state.params, config)
        else:
            val_loss, val_acc = float("nan"), float("nan")
        state.history["val_loss"].append(val_loss)
        state.history["val_acc"].append(val_acc)
        log.debug("epoch %d train_loss=%.4f train_acc=%.4f val_loss=%.4f val_acc=%.4f",
                  epoch, train_loss, train_acc, val_loss, val_acc)
        if not np.isfinite(train_loss):
            raise DivergedError(f"epoch {epoch}: training loss is {train_loss}")
        if has_val:
            stop = stopper.update(epoch, val_loss)
            if stopper.best_epoch == epoch:
                best_params = copy.deepcopy(state.params)
            if stop:
                break
    if best_params is not None:
        state.params = best_params
        state.best_epoch = stopper.best_epoch
    return state


def train(split, config: TransformerConfig, train_config: TrainConfig) -> tuple[TrainState, dict]:
    """Train on ``split.train``, early-stopping on ``split.validation``.

    ``split`` is a :class:`nextact.features.SplitDataset`; targets are the
    0-based class positions of each dataset.
    """
    layout = split.train.layout
    tr = Batch.from_matrix(split.train.to_matrix(), layout)
    val = None
    y_val = None
    if len(split.validation):
        val = Batch.from_matrix(split.validation.to_matrix(), layout)
        y_val = split.validation.targets
    state = fit_arrays(tr, split.train.targets, config, train_config, val, y_val)
    return state, state.history


def predict_next(state: TrainState, sample, config: TransformerConfig,
                 class_names) -> list[tuple[str, float]]:
    """Rank every class for one prefix sample, most probable first."""
    if len(class_names) != config.num_classes:
        raise ManifestMismatchError(
            f"{len(class_names)} class names for a {config.num_classes}-class model")
    if len(sample.mask) != config.max_len or \
            len(sample.categorical_seqs) != len(config.categorical):
        raise ManifestMismatchError("sample was not encoded with this model's manifest")
    probs = forward(Batch.from_samples([sample], config.max_len), state.params, config)[0]
    order = np.argsort(-probs, kind="stable")
    return [(class_names[i], float(probs[i])) for i in order]
