"""scikit-learn compatible wrappers.

``SourceClassifier`` trains the source model; ``ActiveAdapter`` takes a fitted
source model and adapts it to a target pool, revealing target labels only for
the samples it queries.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .adaptation import AdaptConfig, LossWeights
from .domains import LabeledSet
from .harness import (CasSettings, ExperimentConfig, ModelConfig, PretrainConfig,
                      pretrain_source, query_adapt)
from .model import MlpModel


def _encode(y):
    classes = unique_labels(y)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    return classes, np.searchsorted(classes, y)


class _ModelMixin:
    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return self.model_.probs(X)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def transform(self, X):
        """Bottleneck features."""
        check_is_fitted(self, "model_")
        return self.model_.features(check_array(X, dtype=np.float64))


class SourceClassifier(_ModelMixin, ClassifierMixin, TransformerMixin, BaseEstimator):
    def __init__(self, hidden=(32,), bottleneck=16, activation="tanh", epochs=40,
                 batch_size=64, eta0=0.05, val_fraction=0.1, random_state=0):
        self.hidden = hidden
        self.bottleneck = bottleneck
        self.activation = activation
        self.epochs = epochs
        self.batch_size = batch_size
        self.eta0 = eta0
        self.val_fraction = val_fraction
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_enc = _encode(y)
        data = LabeledSet(X, y_enc, np.arange(len(y_enc)), len(self.classes_))
        cfg = ExperimentConfig(seed=int(self.random_state or 0))
        cfg.model = ModelConfig(hidden=list(self.hidden), bottleneck=self.bottleneck,
                                activation=self.activation)
        cfg.pretrain = PretrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                                      eta0=self.eta0, val_fraction=self.val_fraction)
        self.model_ = pretrain_source(data, cfg)
        self.n_features_in_ = X.shape[1]
        self.validation_accuracy_ = self.model_.val_accuracy
        return self


class ActiveAdapter(_ModelMixin, ClassifierMixin, TransformerMixin, BaseEstimator):
    """Query-and-adapt on a target pool.

    ``fit(X, y)`` treats ``y`` as the annotation oracle: only entries of the
    queried rows are read. ``queried_`` lists the row indices in query order.
    """

    def __init__(self, source_model=None, strategy="cas", budget=0.05, rounds=10,
                 alpha=0.03, lam=0.1, kappa=100, beta1=10.0, beta2=0.9,
                 epochs_per_round=40, batch_size=64, tau=1.0, gamma=0.9, eta0=0.01,
                 mixup=False, freeze_classifier=True, random_state=0):
        self.source_model = source_model
        self.strategy = strategy
        self.budget = budget
        self.rounds = rounds
        self.alpha = alpha
        self.lam = lam
        self.kappa = kappa
        self.beta1 = beta1
        self.beta2 = beta2
        self.epochs_per_round = epochs_per_round
        self.batch_size = batch_size
        self.tau = tau
        self.gamma = gamma
        self.eta0 = eta0
        self.mixup = mixup
        self.freeze_classifier = freeze_classifier
        self.random_state = random_state

    def _source(self) -> tuple[MlpModel, np.ndarray | None]:
        src = self.source_model
        if isinstance(src, SourceClassifier):
            check_is_fitted(src, "model_")
            return src.model_.copy(), src.classes_
        if isinstance(src, MlpModel):
            return src.copy(), None
        raise ValueError("source_model must be a fitted SourceClassifier or an MlpModel")

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        model, classes = self._source()
        if classes is None:
            classes = np.arange(model.n_classes)
        if X.shape[1] != model.input_dim:
            raise ValueError(f"X has {X.shape[1]} features, source model expects {model.input_dim}")
        unknown = np.setdiff1d(np.unique(y), classes)
        if unknown.size:
            raise ValueError(f"labels {unknown.tolist()} are not in the source label space")
        self.classes_ = classes
        pool = LabeledSet(X, np.searchsorted(classes, y), np.arange(X.shape[0]), len(classes))
        cfg = ExperimentConfig(seed=int(self.random_state or 0), strategy=self.strategy,
                               budget=self.budget, rounds=self.rounds, eta0=self.eta0)
        cfg.cas = CasSettings(alpha=self.alpha, lam=self.lam, kappa=self.kappa)
        cfg.loss = LossWeights(self.beta1, self.beta2)
        cfg.adapt = AdaptConfig(epochs_per_round=self.epochs_per_round, batch_size=self.batch_size,
                                tau=self.tau, gamma=self.gamma, mixup_enabled=self.mixup)
        cfg.model.freeze_classifier = self.freeze_classifier
        cfg.validate()
        result = query_adapt(model, pool, cfg)
        self.model_ = result.model
        self.queried_ = [s["id"] for s in result.selections]
        self.loss_trace_ = result.losses
        self.vault_ = result.vault
        self.n_features_in_ = X.shape[1]
        return self
