"""Video classifier: per-modality attention clusters, concatenation, dropout and
a fully connected softmax classifier."""

import numpy as np

from . import tensor as T
from .clusters import ClusterConfig, MultimodalClusters
from .errors import ConfigError, DimensionError


class ClusterModel:
    """Attention clusters followed by a linear classifier.

    With ``classifier_hidden > 0`` a relu hidden layer of that width sits
    between the global feature and the output layer, and dropout moves to the
    hidden activations. The output layer starts at zero, so an untrained model
    predicts the uniform distribution.
    """

    def __init__(self, cluster_cfgs, n_classes, classifier_hidden=0, dropout=0.0, rng=None, params=None):
        if n_classes < 2:
            raise ConfigError(f"need at least two classes, got {n_classes}")
        if not 0.0 <= dropout < 1.0:
            raise ConfigError(f"dropout probability must lie in [0, 1), got {dropout}")
        self.cluster_cfgs = [c if isinstance(c, ClusterConfig) else ClusterConfig(**c) for c in cluster_cfgs]
        self.n_classes = int(n_classes)
        self.classifier_hidden = int(classifier_hidden)
        self.dropout = float(dropout)
        rng = np.random.default_rng(0) if rng is None else rng
        self.clusters = MultimodalClusters.build(self.cluster_cfgs, rng=rng, params=params)

        width = self.clusters.output_dim
        head = {}
        if self.classifier_hidden:
            head["hid.w"] = (rng.standard_normal((self.classifier_hidden, width)) * np.sqrt(2.0 / width)).astype(np.float32)
            head["hid.b"] = np.zeros(self.classifier_hidden, dtype=np.float32)
            width = self.classifier_hidden
        head["cls.w"] = np.zeros((self.n_classes, width), dtype=np.float32)
        head["cls.b"] = np.zeros(self.n_classes, dtype=np.float32)
        self.head = {}
        for name, value in head.items():
            if params is not None:
                if name not in params:
                    raise ConfigError(f"missing classifier parameter {name!r}")
                given = params[name]
                if np.shape(given.data if isinstance(given, T.Tensor) else given) != value.shape:
                    raise DimensionError(f"classifier parameter {name!r} has shape {np.shape(given)}, expected {value.shape}")
                if isinstance(given, T.Tensor):
                    self.head[name] = given
                    continue
                given = np.asarray(given)
                value = given.astype(given.dtype if given.dtype == np.float64 else np.float32, copy=True)
            self.head[name] = T.Tensor(value, requires_grad=True)

    @property
    def params(self):
        out = dict(self.clusters.params)
        out.update(self.head)
        return out

    def arrays(self):
        return {k: p.data for k, p in self.params.items()}

    def global_features(self, inputs, return_weights=False):
        inputs = [T.as_tensor(x) for x in inputs]
        return self.clusters.forward(inputs, return_weights=return_weights)

    def forward(self, inputs, training=False, rng=None, return_weights=False):
        """Logits (B, n_classes) for a list of per-modality batches (B, L_k, M_k)."""
        g, weights = self.global_features(inputs, return_weights=True)
        h = g
        if self.classifier_hidden:
            h = T.relu(T.linear(h, self.head["hid.w"], self.head["hid.b"]))
        h = T.dropout(h, self.dropout, rng, training=training)
        logits = T.linear(h, self.head["cls.w"], self.head["cls.b"])
        return (logits, weights) if return_weights else logits

    __call__ = forward

    def config(self):
        return {
            "modalities": [c.to_dict() for c in self.cluster_cfgs],
            "n_classes": self.n_classes,
            "classifier_hidden": self.classifier_hidden,
            "dropout": self.dropout,
        }

    @classmethod
    def from_config(cls, config, params=None, rng=None):
        return cls(
            [ClusterConfig(**c) for c in config["modalities"]],
            n_classes=config["n_classes"],
            classifier_hidden=config.get("classifier_hidden", 0),
            dropout=config.get("dropout", 0.0),
            params=params,
            rng=rng,
        )
