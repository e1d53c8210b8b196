"""scikit-learn style wrappers around the extractor and the cluster classifier.

Both estimators follow the usual contract: hyperparameters are plain
constructor arguments (so ``get_params``/``set_params``/``clone`` work),
learned state lives in attributes with a trailing underscore, and ``fit``
returns ``self``.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .errors import ConfigError, DimensionError
from .extractor import FEATURE_DIM, FrameCNN, extract_features, frame_accuracy, pretrain
from .flashmnist import FRAME_SIDE, N_CLASSES
from .training import (
    TrainConfig,
    build_model,
    cluster_configs_for,
    evaluate_model,
    fit as fit_model,
    predict_logits,
    split_columns,
)


def check_frames(X):
    """Frames as a (n, 28, 28) array; uint8 stays uint8, anything else becomes float32."""
    X = np.asarray(X)
    if X.ndim != 3 or X.shape[1:] != (FRAME_SIDE, FRAME_SIDE):
        raise DimensionError(f"expected frames of shape (n, {FRAME_SIDE}, {FRAME_SIDE}), got {X.shape}")
    return X if X.dtype == np.uint8 else X.astype(np.float32)


def check_feature_sets(X, dim=None):
    """Local feature sets as a finite float32 (n, L, M) array."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 3 or X.shape[1] < 1:
        raise DimensionError(f"expected feature sets of shape (n, L, M) with L >= 1, got {X.shape}")
    if dim is not None and X.shape[2] != dim:
        raise DimensionError(f"estimator was fitted on M={dim}, got M={X.shape[2]}")
    if not np.isfinite(X).all():
        raise ConfigError("feature sets contain NaN or infinite values")
    return X


def check_labels(y, n, n_classes):
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise DimensionError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ConfigError("labels must be integer class indices")
    y = y.astype(np.int64)
    if len(y) and (y.min() < 0 or y.max() >= n_classes):
        raise ConfigError(f"labels must lie in [0, {n_classes}), got range [{y.min()}, {y.max()}]")
    return y


class FrameFeatureExtractor(TransformerMixin, BaseEstimator):
    """Frame CNN that maps 28x28 frames to 50-d local features.

    ``fit`` pretrains on frames labelled 0-9 (digit present) or 10 (noise
    only). ``transform`` accepts single frames (n, 28, 28) or whole videos
    (n, L, 28, 28) and returns (n, 50) or (n, L, 50) features.
    """

    def __init__(self, epochs=10, learning_rate=1e-3, batch_size=128, random_state=0):
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X = check_frames(X)
        y = check_labels(y, len(X), 11)
        self.model_, self.history_ = pretrain(X, y, epochs=self.epochs, lr=self.learning_rate,
                                              batch_size=self.batch_size, seed=self.random_state)
        self.n_features_out_ = FEATURE_DIM
        return self

    @classmethod
    def from_model(cls, model, **params):
        est = cls(**params)
        est.model_ = model if isinstance(model, FrameCNN) else FrameCNN(model)
        est.history_ = None
        est.n_features_out_ = FEATURE_DIM
        return est

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = np.asarray(X)
        if X.ndim == 4:
            return extract_features(self.model_, X)
        return self.model_.features(check_frames(X)).data

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.logits(check_frames(X)).data.argmax(axis=1)

    def score(self, X, y):
        check_is_fitted(self, "model_")
        X = check_frames(X)
        return frame_accuracy(self.model_, X, check_labels(y, len(X), 11))


class AttentionClusterClassifier(ClassifierMixin, BaseEstimator):
    """Attention clusters over local feature sets followed by a softmax classifier.

    ``X`` is an (n, L, M) array of local feature sets. With ``modality_dims``
    the feature columns are split into consecutive modalities (for example
    ``(25, 25)``), each getting its own cluster; ``weighting``, ``n_units``
    and ``shifting`` may then be per-modality tuples.

    Labels are integer class indices in ``[0, n_classes)``; ``classes_`` is
    always ``arange(n_classes)`` so that probabilities line up with the
    1024 Flash-MNIST categories even when a split misses some of them.
    """

    def __init__(self, weighting="fc1", n_units=8, shifting=True, fc2_hidden=10, modality_dims=None,
                 n_classes=N_CLASSES, classifier_hidden=1024, dropout=0.5, optimizer="adam",
                 learning_rate=1e-3, clip_norm=None, epochs=30, batch_size=128, subset_size=None,
                 balance=False, random_state=0):
        self.weighting = weighting
        self.n_units = n_units
        self.shifting = shifting
        self.fc2_hidden = fc2_hidden
        self.modality_dims = modality_dims
        self.n_classes = n_classes
        self.classifier_hidden = classifier_hidden
        self.dropout = dropout
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.clip_norm = clip_norm
        self.epochs = epochs
        self.batch_size = batch_size
        self.subset_size = subset_size
        self.balance = balance
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(
            optimizer=self.optimizer, lr=self.learning_rate, clip_norm=self.clip_norm, dropout=self.dropout,
            epochs=self.epochs, batch_size=self.batch_size, seed=self.random_state,
            subset_size=self.subset_size, balance=self.balance, classifier_hidden=self.classifier_hidden,
            n_classes=self.n_classes,
        )

    def _inputs(self, X):
        X = check_feature_sets(X, getattr(self, "n_features_in_", None))
        dims = None if self.modality_dims is None else [int(d) for d in self.modality_dims]
        return split_columns(X, dims)

    def fit(self, X, y, eval_set=None):
        cfg = self._train_config()
        self.__dict__.pop("n_features_in_", None)
        inputs = self._inputs(X)
        y = check_labels(y, len(inputs[0]), self.n_classes)
        if cfg.subset_size is not None and cfg.subset_size > inputs[0].shape[1]:
            raise ConfigError(f"subset size {cfg.subset_size} exceeds set length {inputs[0].shape[1]}")
        self.n_features_in_ = inputs[0].shape[-1] if len(inputs) == 1 else sum(x.shape[-1] for x in inputs)
        eval_data = None
        if eval_set is not None:
            Xe, ye = eval_set
            eval_inputs = self._inputs(Xe)
            eval_data = (eval_inputs, check_labels(ye, len(eval_inputs[0]), self.n_classes))
        cluster_cfgs = cluster_configs_for(inputs, self.weighting, self.n_units, self.shifting, self.fc2_hidden)
        self.model_ = build_model(cluster_cfgs, cfg)
        self.history_, best, _ = fit_model(self.model_, inputs, y, cfg, eval_data)
        self.best_epoch_ = best[0]
        self.classes_ = np.arange(self.n_classes)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return predict_logits(self.model_, self._inputs(X))

    def predict_proba(self, X):
        logits = self.decision_function(X).astype(np.float64)
        return T.softmax(T.Tensor(logits), axis=1).data

    def predict(self, X):
        return self.decision_function(X).argmax(axis=1)

    def transform(self, X):
        """Concatenated global features g, shape (n, sum of N_k * M_k)."""
        check_is_fitted(self, "model_")
        return self.model_.global_features(self._inputs(X)).data

    def attention_weights(self, X):
        """Per-modality attention weights, each (n, N_k, L)."""
        check_is_fitted(self, "model_")
        _, weights = self.model_.global_features(self._inputs(X), return_weights=True)
        return [w.data for w in weights]

    def evaluate(self, X, y):
        check_is_fitted(self, "model_")
        inputs = self._inputs(X)
        return evaluate_model(self.model_, inputs, check_labels(y, len(inputs[0]), self.n_classes))
