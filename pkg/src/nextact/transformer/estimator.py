from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ..features import FeatureLayout, ManifestMismatchError
from .model import Batch, TransformerConfig, check_params, forward
from .training import TrainConfig, TrainState, fit_arrays

CHECKPOINT_FORMAT = "nextact-transformer"
CHECKPOINT_VERSION = 1

# paper: full-size reproduction settings; desk: small enough for CPU tests
PROFILES = {
    "paper": dict(embed_dim=256, num_heads=8, ff_dim=256, batch_size=2, epochs=50),
    "desk": dict(embed_dim=16, num_heads=2, ff_dim=32, batch_size=32, epochs=50),
}


def _group_holdout(groups, fraction, seed):
    uniq = np.array(sorted(set(groups)), dtype=object)
    order = np.random.default_rng(seed).permutation(len(uniq))
    n_val = int(np.floor(fraction * len(uniq) + 0.5))
    held = set(uniq[order[:n_val]])
    return np.array([g in held for g in groups])


class DAWTransformerClassifier(ClassifierMixin, BaseEstimator):
    """Dynamic attribute-aware transformer for next-activity classification.

    Consumes the flat prefix matrix produced by
    :meth:`nextact.features.EncodedDataset.to_matrix`; ``layout`` tells the
    model how to unpack it into per-attribute sequences and the padding mask.

    Parameters
    ----------
    layout : FeatureLayout
        Column layout of ``X``.
    classes : array-like, optional
        Full label set. Defaults to the labels seen in ``fit``.
    embed_dim, num_heads, ff_dim, num_blocks, dropout
        Architecture; ``embed_dim`` must be divisible by ``num_heads``.
    learning_rate, batch_size, epochs, patience
        Adam and loop settings. ``patience=None`` disables early stopping.
    validation_fraction : float
        Share of ``groups`` (cases) held out for early stopping when no
        ``eval_set`` is passed to ``fit``.
    random_state : int
    """

    def __init__(self, layout: FeatureLayout | None = None, classes=None,
                 embed_dim=16, num_heads=2, ff_dim=32, num_blocks=1, dropout=0.1,
                 learning_rate=1e-3, batch_size=32, epochs=50, patience=5,
                 validation_fraction=0.2, random_state=0):
        self.layout = layout
        self.classes = classes
        self.embed_dim = embed_dim
        self.num_heads = num_heads
        self.ff_dim = ff_dim
        self.num_blocks = num_blocks
        self.dropout = dropout
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    @classmethod
    def from_profile(cls, profile: str, **kwargs) -> "DAWTransformerClassifier":
        params = dict(PROFILES[profile])
        params.update(kwargs)
        return cls(**params)

    def _encode_y(self, y):
        idx = np.searchsorted(self.classes_, y)
        idx = np.clip(idx, 0, len(self.classes_) - 1)
        if not np.all(self.classes_[idx] == y):
            raise ValueError("y contains labels outside `classes`")
        return idx

    def fit(self, X, y, groups=None, eval_set=None):
        if self.layout is None:
            raise ValueError("DAWTransformerClassifier needs a FeatureLayout")
        X, y = check_X_y(X, y)
        self.n_features_in_ = X.shape[1]
        self.classes_ = np.unique(y if self.classes is None else np.asarray(self.classes))
        y_enc = self._encode_y(y)
        self.config_ = TransformerConfig.from_layout(
            self.layout, len(self.classes_), embed_dim=self.embed_dim,
            num_heads=self.num_heads, ff_dim=self.ff_dim, num_blocks=self.num_blocks,
            dropout=self.dropout)
        train_cfg = TrainConfig(self.learning_rate, self.batch_size, self.epochs,
                                self.validation_fraction, self.patience,
                                self.random_state)

        val_batch, y_val = None, None
        if eval_set is not None:
            Xv, yv = check_X_y(*eval_set)
            val_batch, y_val = Batch.from_matrix(Xv, self.layout), self._encode_y(yv)
        elif self.validation_fraction and self.patience is not None:
            if groups is None:
                groups = np.arange(len(y))
            elif len(groups) != len(y):
                raise ValueError(f"groups has {len(groups)} entries for {len(y)} samples")
            held = _group_holdout(list(groups), self.validation_fraction,
                                  self.random_state)
            if held.any() and not held.all():
                val_batch = Batch.from_matrix(X[held], self.layout)
                y_val = y_enc[held]
                X, y_enc = X[~held], y_enc[~held]

        self.state_ = fit_arrays(Batch.from_matrix(X, self.layout), y_enc, self.config_,
                                 train_cfg, val_batch, y_val)
        self.history_ = self.state_.history
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "state_")
        X = check_array(X)
        batch = Batch.from_matrix(X, self.layout)
        out = [forward(batch.take(slice(i, i + 512)), self.state_.params, self.config_)
               for i in range(0, len(batch), 512)]
        return np.concatenate(out) if out else np.zeros((0, len(self.classes_)))

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]

    def predict_next(self, x, class_names=None) -> list[tuple[object, float]]:
        """Rank all classes for one flat sample vector, most probable first."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_features_in_,):
            raise ManifestMismatchError(
                f"sample has shape {x.shape}; model expects ({self.n_features_in_},)")
        probs = self.predict_proba(x[None, :])[0]
        names = self.classes_ if class_names is None else class_names
        order = np.argsort(-probs, kind="stable")
        return [(names[i], float(probs[i])) for i in order]

    # -- checkpoints ---------------------------------------------------------

    def save(self, path, manifest_hash: str | None = None) -> None:
        check_is_fitted(self, "state_")
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "manifest_hash": manifest_hash,
            "estimator_params": {k: v for k, v in self.get_params().items()
                                 if k not in ("layout", "classes")},
            "layout": self.layout.to_dict(),
            "classes": self.classes_.tolist(),
            "config": self.config_.to_dict(),
            "history": self.history_,
            "best_epoch": self.state_.best_epoch,
            "params": {name: {"shape": list(t.shape), "data": t.ravel().tolist()}
                       for name, t in sorted(self.state_.params.items())},
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True))

    @classmethod
    def load(cls, path, manifest_hash: str | None = None) -> "DAWTransformerClassifier":
        payload = json.loads(Path(path).read_text())
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a transformer checkpoint")
        if payload["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {payload['version']}")
        if manifest_hash is not None and payload["manifest_hash"] != manifest_hash:
            raise ManifestMismatchError("checkpoint was trained against another manifest")
        layout = FeatureLayout.from_dict(payload["layout"])
        model = cls(layout=layout, **payload["estimator_params"])
        model.classes_ = np.asarray(payload["classes"])
        model.config_ = TransformerConfig.from_dict(payload["config"])
        params = {name: np.asarray(t["data"], dtype=float).reshape(t["shape"])
                  for name, t in payload["params"].items()}
        check_params(params, model.config_)
        model.state_ = TrainState.fresh(params)
        model.state_.history = payload["history"]
        model.state_.best_epoch = payload["best_epoch"]
        model.history_ = model.state_.history
        model.n_features_in_ = layout.n_features
        return model
