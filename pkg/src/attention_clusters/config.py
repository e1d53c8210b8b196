"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment, blank lines are ignored. Keys
carry their unit or meaning in the name (``lr``, ``epochs``, ``clip_l2``,
``dropout_p``). Lists are comma separated; ``none`` clears an optional value.
Unknown keys are rejected so a typo never silently falls back to a default.

Example::

    seed = 0
    weighting = fc1
    n_units = 32
    shifting = on
    epochs = 100
"""

import dataclasses
import os
from dataclasses import dataclass, field, fields
from typing import Optional

from .clusters import ClusterConfig
from .errors import ConfigError, StorageError
from .training import TrainConfig

DATA_DIR_ENV = "ATTNCLUSTERS_DATA"
DEFAULT_DATA_DIR = "data"

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def default_data_dir():
    return os.environ.get(DATA_DIR_ENV, DEFAULT_DATA_DIR)


@dataclass
class RunConfig:
    # paths
    mnist_dir: str = field(default_factory=lambda: os.path.join(default_data_dir(), "mnist"))
    train_data: str = ""
    test_data: str = ""
    extractor_ckpt: str = ""
    train_features: str = ""
    test_features: str = ""
    out_dir: str = "runs"
    # dataset generation
    seed: int = 0
    train_count: int = 102_400
    test_count: int = 10_240
    stratified: bool = False
    # extractor pretraining
    pretrain_epochs: int = 10
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 128
    pretrain_variants: int = 5
    pretrain_background: int = 30_000
    # attention clusters
    weighting: str = "fc1"
    n_units: int = 32
    shifting: bool = True
    fc2_hidden: int = 10
    column_split: Optional[list] = None
    # training
    optimizer: str = "adam"
    lr: float = 1e-3
    clip_l2: Optional[float] = None
    dropout_p: float = 0.5
    epochs: int = 100
    batch_size: int = 128
    subset_size: Optional[int] = None
    balance: bool = False
    classifier_hidden: int = 1024
    n_classes: int = 1024
    # ablation grid
    ablate_sizes: list = field(default_factory=lambda: [1, 2, 4, 8, 16, 32, 64, 128])
    ablate_weightings: list = field(default_factory=lambda: ["average", "fc1", "fc2"])
    jobs: int = 1
    # attention-map export
    visualize_samples: int = 8

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("seed", "train_count", "test_count", "pretrain_epochs", "pretrain_background", "visualize_samples"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("pretrain_variants", "pretrain_batch", "jobs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.pretrain_lr <= 0:
            raise ConfigError(f"pretrain_lr must be positive, got {self.pretrain_lr}")
        for w in self.ablate_weightings:
            ClusterConfig(w, 1)
        if any(n < 1 for n in self.ablate_sizes):
            raise ConfigError("ablate_sizes must all be >= 1")
        if self.column_split is not None and (len(self.column_split) < 1 or min(self.column_split) < 1):
            raise ConfigError("column_split needs positive widths")
        self.cluster_config(dim=sum(self.column_split) if self.column_split else 50)
        self.train_config()

    # -- conversions ----------------------------------------------------------

    def train_config(self):
        return TrainConfig(
            optimizer=self.optimizer, lr=self.lr, clip_norm=self.clip_l2, dropout=self.dropout_p,
            epochs=self.epochs, batch_size=self.batch_size, seed=self.seed, subset_size=self.subset_size,
            balance=self.balance, classifier_hidden=self.classifier_hidden, n_classes=self.n_classes,
        )

    def cluster_config(self, dim, weighting=None, n_units=None, shifting=None):
        return ClusterConfig(
            self.weighting if weighting is None else weighting,
            self.n_units if n_units is None else n_units,
            self.shifting if shifting is None else shifting,
            self.fc2_hidden,
            dim,
        )

    def replace(self, **changes):
        unknown = set(changes) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown configuration key(s): {', '.join(sorted(unknown))}")
        return dataclasses.replace(self, **changes)

    # -- text form ------------------------------------------------------------

    @classmethod
    def from_text(cls, text, source="<config>"):
        kinds = {f.name: f for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or not key:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            if key not in kinds:
                raise ConfigError(f"{source}:{lineno}: unknown configuration key {key!r}")
            if key in values:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
            values[key] = parse_value(key, value, source, lineno)
        return cls(**values)

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise StorageError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, source=str(path))

    def to_text(self):
        lines = [f"{f.name} = {format_value(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def save(self, path):
        try:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(self.to_text())
        except OSError as exc:
            raise StorageError(f"cannot write config {path}: {exc}") from exc


_INT_LISTS = {"ablate_sizes", "column_split"}
_STR_LISTS = {"ablate_weightings"}
_OPTIONAL = {"column_split", "clip_l2", "subset_size"}


def parse_value(key, value, source="<config>", lineno=0):
    kind = {f.name: f.type for f in fields(RunConfig)}[key]
    where = f"{source}:{lineno}: {key}"
    if key in _OPTIONAL and value.lower() == "none":
        return None
    try:
        if key in _INT_LISTS:
            return [int(v) for v in value.split(",") if v.strip()]
        if key in _STR_LISTS:
            return [v.strip().lower() for v in value.split(",") if v.strip()]
        if kind is bool or kind == "bool":
            low = value.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"expected on/off, got {value!r}")
        if kind in (int, "int") or key == "subset_size":
            return int(value)
        if kind in (float, "float") or key == "clip_l2":
            return float(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def format_value(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    return str(value)
