"""Training and evaluation of attention-cluster classifiers on feature caches."""

import logging
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as T
from .checkpoint import Checkpoint
from .clusters import ClusterConfig
from .errors import ConfigError, ConsistencyError, DimensionError, NumericError, TrainingError
from .model import ClusterModel
from .optim import make_optimizer

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    clip_norm: float = None
    dropout: float = 0.5
    epochs: int = 100
    batch_size: int = 128
    seed: int = 0
    subset_size: int = None
    balance: bool = False
    classifier_hidden: int = 1024
    n_classes: int = 1024

    def __post_init__(self):
        if self.optimizer not in ("adam", "rmsprop"):
            raise ConfigError(f"optimizer must be adam or rmsprop, got {self.optimizer!r}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout probability must lie in [0, 1), got {self.dropout}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.subset_size is not None and self.subset_size < 1:
            raise ConfigError(f"subset size must be >= 1, got {self.subset_size}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError(f"clip norm must be positive, got {self.clip_norm}")

    def to_dict(self):
        return asdict(self)


@dataclass
class EvalReport:
    top1: float
    top5: float
    loss: float
    per_class: np.ndarray  # accuracy per class, nan where the class is absent
    n_samples: int

    def summary(self):
        return {"top1": self.top1, "top5": self.top5, "loss": self.loss, "n_samples": self.n_samples}


# ---------------------------------------------------------------------------
# augmentation and sampling
# ---------------------------------------------------------------------------


def subsample_features(X, size, rng):
    """``size`` distinct rows of X (L, M) chosen uniformly, in original order."""
    X = np.asarray(X)
    if not 1 <= size <= X.shape[0]:
        raise ConfigError(f"subset size must lie in [1, {X.shape[0]}], got {size}")
    rows = np.sort(rng.choice(X.shape[0], size=size, replace=False))
    return X[rows]


def subsample_batch(X, size, rng):
    """Independent row subsets for every set of a batch (B, L, M)."""
    batch, length = X.shape[:2]
    if not 1 <= size <= length:
        raise ConfigError(f"subset size must lie in [1, {length}], got {size}")
    rows = np.sort(np.argsort(rng.random((batch, length)), axis=1)[:, :size], axis=1)
    return np.take_along_axis(X, rows[:, :, None], axis=1)


def class_balanced_weights(labels):
    """Per-sample weight 1/S for a sample whose class has S members,
    normalised to a probability vector."""
    labels = np.asarray(labels)
    _, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    weights = 1.0 / counts[inverse]
    return weights / weights.sum()


def balanced_sampler(labels, rng):
    """Endless stream of indices drawn with probability proportional to 1/S."""
    p = class_balanced_weights(labels)
    n = len(p)
    while True:
        yield from rng.choice(n, size=max(n, 1024), p=p)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def predict_logits(model, inputs, batch_size=1024):
    n = len(inputs[0])
    chunks = [model.forward([x[i:i + batch_size] for x in inputs]).data for i in range(0, n, batch_size)]
    return np.concatenate(chunks) if chunks else np.zeros((0, model.n_classes), dtype=np.float32)


def report_from_logits(logits, labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        return EvalReport(0.0, 0.0, float("nan"), np.full(n_classes, np.nan), 0)
    logits = logits.astype(np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(n), labels].mean())
    top1_hit = logits.argmax(axis=1) == labels
    k = min(5, logits.shape[1])
    # rank of the true class in a stable descending sort: strictly larger
    # scores plus tied scores at lower class indices, consistent with argmax
    true_scores = logits[np.arange(n), labels][:, None]
    ahead = (logits > true_scores) | ((logits == true_scores) & (np.arange(logits.shape[1]) < labels[:, None]))
    top5_hit = ahead.sum(axis=1) < k
    counts = np.bincount(labels, minlength=n_classes)
    hits = np.bincount(labels, weights=top1_hit, minlength=n_classes)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(counts > 0, hits / counts, np.nan)
    return EvalReport(float(top1_hit.mean()), float(top5_hit.mean()), loss, per_class, n)


def evaluate_model(model, inputs, labels, batch_size=1024):
    """Dropout off, every local feature used."""
    for x, cfg in zip(inputs, model.cluster_cfgs):
        if x.shape[-1] != cfg.dim:
            raise ConfigError(f"model expects feature dimension {cfg.dim}, cache provides {x.shape[-1]}")
    return report_from_logits(predict_logits(model, inputs, batch_size), labels, model.n_classes)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _batches(n, cfg, rng, sampler):
    if sampler is not None:
        order = np.fromiter((next(sampler) for _ in range(n)), dtype=np.int64, count=n)
    else:
        order = rng.permutation(n)
    for start in range(0, n, cfg.batch_size):
        yield np.sort(order[start:start + cfg.batch_size])


def fit(model, inputs, labels, cfg, eval_data=None, progress=None):
    """Train ``model`` in place.

    Returns ``(history, best, final optimizer state)``. History has one record
    per epoch; ``best`` is ``(epoch, parameter copies, optimizer state)`` for
    the epoch with the highest held-out top-1 accuracy, or the last epoch when
    there is no held-out data.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if any(len(x) != n for x in inputs):
        raise ConsistencyError("every modality must provide one feature set per label")
    rng = np.random.default_rng(np.random.SeedSequence(int(cfg.seed), spawn_key=(5,)))
    opt = make_optimizer(cfg.optimizer, model.params, cfg.lr, cfg.clip_norm)
    sampler = balanced_sampler(labels, rng) if cfg.balance else None
    history, best = [], None
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        loss_sum = 0.0
        correct = seen = 0
        for idx in _batches(n, cfg, rng, sampler):
            xs = [x[idx] for x in inputs]
            if cfg.subset_size is not None:
                xs = [subsample_batch(x, cfg.subset_size, rng) for x in xs]
            try:
                logits = model.forward(xs, training=True, rng=rng)
                loss = T.cross_entropy(logits, labels[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
            except NumericError as exc:
                raise TrainingError(f"training diverged in epoch {epoch}: {exc}", epoch=epoch) from exc
            except TrainingError as exc:
                raise TrainingError(f"training diverged in epoch {epoch}: {exc}", epoch=epoch, parameter=exc.parameter) from exc
            loss_sum += float(loss.data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
            seen += len(idx)
        if not np.isfinite(loss_sum):
            raise TrainingError(f"training loss is not finite in epoch {epoch}", epoch=epoch)
        record = {"epoch": epoch, "loss": loss_sum / max(seen, 1), "train_acc": correct / max(seen, 1)}
        if eval_data is not None:
            report = evaluate_model(model, *eval_data)
            record.update(test_acc=report.top1, test_top5=report.top5, test_loss=report.loss)
        record["seconds"] = time.perf_counter() - started
        history.append(record)
        score = record.get("test_acc", 0.0)
        if best is None or eval_data is None or score > best[1]:
            best = (epoch, score, {k: v.copy() for k, v in model.arrays().items()}, _copy_state(opt.state))
        logger.info("epoch %d: %s", epoch, {k: round(v, 4) for k, v in record.items()})
        if progress:
            progress(record)
    if best is None:
        best = (0, 0.0, {k: v.copy() for k, v in model.arrays().items()}, _copy_state(opt.state))
    return history, (best[0], best[2], best[3]), opt.state


def _copy_state(state):
    out = {}
    for k, v in state.items():
        out[k] = {n: a.copy() for n, a in v.items()} if isinstance(v, dict) else v
    return out


def _history_for_storage(history):
    # wall-clock timings would make otherwise identical checkpoints differ
    return [{k: v for k, v in r.items() if k != "seconds"} for r in history]


# ---------------------------------------------------------------------------
# feature caches in, checkpoints out
# ---------------------------------------------------------------------------


def split_columns(features, dims):
    """Split the last axis of (n, L, M) features into consecutive blocks."""
    if dims is None:
        return [features]
    if sum(dims) != features.shape[-1]:
        raise DimensionError(f"modality widths {dims} do not add up to feature dimension {features.shape[-1]}")
    bounds = np.cumsum(dims)[:-1]
    return [np.ascontiguousarray(block) for block in np.split(features, bounds, axis=-1)]


def modality_inputs(caches, column_split=None):
    """Per-modality feature arrays and the shared labels from one or more caches.

    Several caches must be aligned sample by sample. A single cache may be
    split by columns into synthetic modalities.
    """
    if not caches:
        raise ConfigError("at least one feature cache is required")
    labels = caches[0].labels
    for c in caches[1:]:
        if len(c) != len(labels) or not np.array_equal(c.labels, labels):
            raise ConsistencyError("feature caches are not aligned (labels differ)")
    if column_split is not None:
        if len(caches) != 1:
            raise ConfigError("column splitting applies to a single feature cache")
        return split_columns(caches[0].features, column_split), labels
    return [c.features for c in caches], labels


def cluster_configs_for(inputs, weighting, n_units, shifting, hidden=10):
    """One ClusterConfig per modality; scalars are broadcast across modalities."""
    k = len(inputs)
    as_list = lambda v: list(v) if isinstance(v, (list, tuple)) else [v] * k
    return [ClusterConfig(w, n, s, h, x.shape[-1]) for x, w, n, s, h in
            zip(inputs, as_list(weighting), as_list(n_units), as_list(shifting), as_list(hidden))]


def model_checkpoint(model, cfg, epoch, history, params=None, opt_state=None, extra=None):
    config = model.config()
    config["train"] = cfg.to_dict()
    if extra:
        config.update(extra)
    arrays = params if params is not None else {k: v.copy() for k, v in model.arrays().items()}
    optimizer = {}
    if opt_state is not None:
        optimizer = {k: v for k, v in opt_state.items()}
        optimizer["kind"] = cfg.optimizer
    return Checkpoint("cluster", config, arrays, optimizer, epoch, _history_for_storage(history), cfg.seed)


def build_model(cluster_cfgs, cfg):
    rng = np.random.default_rng(np.random.SeedSequence(int(cfg.seed), spawn_key=(4,)))
    return ClusterModel(cluster_cfgs, cfg.n_classes, cfg.classifier_hidden, cfg.dropout, rng=rng)


def train_cluster(train_caches, cfg, cluster_cfgs, test_caches=None, column_split=None, progress=None):
    """Train a (possibly multimodal) cluster model on feature caches.

    Returns ``(best, final)`` checkpoints; ``best`` is the epoch with the
    highest test top-1 accuracy when test caches are supplied.
    """
    inputs, labels = modality_inputs(train_caches, column_split)
    eval_data = None
    if test_caches is not None:
        test_inputs, test_labels = modality_inputs(test_caches, column_split)
        eval_data = (test_inputs, test_labels)
    if len(cluster_cfgs) != len(inputs):
        raise ConfigError(f"{len(cluster_cfgs)} cluster configurations for {len(inputs)} modalities")
    for x, c in zip(inputs, cluster_cfgs):
        if x.shape[-1] != c.dim:
            raise ConfigError(f"cluster configured for M={c.dim}, modality provides M={x.shape[-1]}")
    model = build_model(cluster_cfgs, cfg)
    history, (best_epoch, best_params, best_state), final_state = fit(model, inputs, labels, cfg, eval_data, progress)
    extra = {"column_split": list(column_split) if column_split else None}
    final = model_checkpoint(model, cfg, cfg.epochs, history, opt_state=final_state, extra=extra)
    best = model_checkpoint(model, cfg, best_epoch, history, params=best_params, opt_state=best_state, extra=extra)
    return best, final


def model_from_checkpoint(ckpt):
    if ckpt.kind != "cluster":
        raise ConfigError(f"expected a cluster checkpoint, got {ckpt.kind!r}")
    return ClusterModel.from_config(ckpt.config, params=ckpt.params)


def evaluate(checkpoint, caches, batch_size=1024):
    """Evaluate a cluster checkpoint (object or path) on aligned feature caches."""
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = ckpt_io.load(checkpoint)
    model = model_from_checkpoint(checkpoint)
    inputs, labels = modality_inputs(caches, checkpoint.config.get("column_split"))
    return evaluate_model(model, inputs, labels, batch_size)
