"""scikit-learn compatible wrappers around the MIL learner."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .core import Label
from .encoder import EmbeddingBag
from .experiment import class_quotas
from .mil import TrainConfig, forward, train


def check_bags(X, dim=None) -> list[np.ndarray]:
    """Validate a sequence of bags and return them as float64 matrices.

    Each bag may be an :class:`EmbeddingBag` or anything convertible to a 2-D
    array with at least one row. All bags must share one width.
    """
    if isinstance(X, np.ndarray) and X.ndim == 2:
        raise ValueError("X must be a sequence of bags (2-D arrays), not a single 2-D array")
    bags = []
    for i, bag in enumerate(X):
        arr = bag.matrix if isinstance(bag, EmbeddingBag) else bag
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ValueError(f"bag {i} must be a non-empty 2-D array, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError(f"bag {i} contains NaN or infinity")
        bags.append(arr)
    if not bags:
        raise ValueError("X contains no bags")
    widths = {b.shape[1] for b in bags}
    if len(widths) > 1:
        raise ValueError(f"bags have different widths {sorted(widths)}")
    if dim is not None and widths != {dim}:
        raise ValueError(f"X has {widths.pop()} features per instance, the model expects {dim}")
    return bags


def check_bag_labels(y, n_bags: int) -> np.ndarray:
    y = np.asarray([int(v) for v in y], dtype=np.int64)
    if y.shape[0] != n_bags:
        raise ValueError(f"{n_bags} bags but {y.shape[0]} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1 (EGFR_NEG/EGFR_POS)")
    return y


class AbmilClassifier(ClassifierMixin, BaseEstimator):
    """Gated attention MIL bag classifier.

    ``X`` is a list of bags; each bag is an ``(n_instances, n_features)`` array
    or an :class:`EmbeddingBag`. ``y`` holds one 0/1 label per bag.

    Early stopping needs a validation set. Pass it as ``eval_set=(X_val,
    y_val)`` to :meth:`fit`; otherwise a stratified ``validation_fraction`` of
    the training bags is held out.
    """

    def __init__(
        self,
        hidden_dim=128,
        learning_rate=1e-4,
        max_epochs=50,
        patience=8,
        validation_fraction=0.2,
        threshold=0.5,
        random_state=0,
    ):
        self.hidden_dim = hidden_dim
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.threshold = threshold
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=int(self.random_state or 0),
            hidden_dim=self.hidden_dim,
        )

    def _holdout(self, y):
        rng = np.random.default_rng(self.random_state)
        counts = {Label(c): int(np.sum(y == c)) for c in (0, 1)}
        quota = class_quotas(counts, self.validation_fraction)
        val = np.zeros(len(y), dtype=bool)
        for c in (0, 1):
            idx = np.flatnonzero(y == c)
            val[idx[rng.permutation(len(idx))[: quota[Label(c)]]]] = True
        if val.all() or not val.any():
            raise ValueError("validation_fraction leaves an empty training or validation set")
        return val

    def fit(self, X, y, eval_set=None):
        config = self._config()
        bags = check_bags(X)
        y = check_bag_labels(y, len(bags))
        if eval_set is not None:
            X_val, y_val = eval_set
            val_bags = check_bags(X_val, bags[0].shape[1])
            y_val = check_bag_labels(y_val, len(val_bags))
            train_pairs = list(zip(bags, y))
            val_pairs = list(zip(val_bags, y_val))
        else:
            mask = self._holdout(y)
            train_pairs = [(b, t) for b, t, m in zip(bags, y, mask) if not m]
            val_pairs = [(b, t) for b, t, m in zip(bags, y, mask) if m]

        result = train(train_pairs, val_pairs, config)
        self.params_ = result.params
        self.history_ = result.history
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = bags[0].shape[1]
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError(f"This {type(self).__name__} instance is not fitted yet.")

    def predict_proba(self, X):
        self._check_fitted()
        bags = check_bags(X, self.n_features_in_)
        p = np.array([forward(b, self.params_).prob for b in bags])
        return np.column_stack([1.0 - p, p])

    def decision_function(self, X):
        self._check_fitted()
        bags = check_bags(X, self.n_features_in_)
        return np.array([forward(b, self.params_).logit for b in bags])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= self.threshold).astype(np.int64)

    def attention(self, X) -> list[np.ndarray]:
        """Per-bag attention weights (each sums to one)."""
        self._check_fitted()
        return [forward(b, self.params_).attention for b in check_bags(X, self.n_features_in_)]
