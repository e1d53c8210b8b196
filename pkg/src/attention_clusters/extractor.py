"""Frame-level CNN: pretraining on noisy MNIST and local-feature export.

The network is conv(10@5x5) -> relu -> maxpool -> conv(20@5x5) -> relu ->
maxpool -> fc(50) -> relu, with an 11-way head (ten digits plus "background
only") used during pretraining. The 50-d post-relu fc activations of the 25
frames of a video form its local feature set.
"""

import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import checkpoint as ckpt_io
from .checkpoint import Checkpoint
from .errors import ConfigError, DimensionError, FormatError, StorageError, TrainingError
from .flashmnist import FRAME_SIDE, N_FRAMES, sample_noise
from .optim import Adam

logger = logging.getLogger(__name__)

FEATURE_DIM = 50
N_FRAME_CLASSES = 11
BACKGROUND_CLASS = 10

FMFT_MAGIC = b"FMFT"
FMFT_VERSION = 1
FMFT_HEADER = struct.Struct("<4sIQII")

PARAM_SHAPES = {
    "conv1_w": (10, 1, 5, 5),
    "conv1_b": (10,),
    "conv2_w": (20, 10, 5, 5),
    "conv2_b": (20,),
    "fc1_w": (FEATURE_DIM, 320),
    "fc1_b": (FEATURE_DIM,),
    "head_w": (N_FRAME_CLASSES, FEATURE_DIM),
    "head_b": (N_FRAME_CLASSES,),
}


class FrameCNN:
    """Parameters and forward pass of the frame classifier."""

    def __init__(self, params=None, rng=None):
        if params is None:
            params = self._init_params(np.random.default_rng(0) if rng is None else rng)
        self.params = {}
        for name, shape in PARAM_SHAPES.items():
            if name not in params:
                raise FormatError(f"extractor parameters lack {name!r}")
            arr = np.asarray(params[name], dtype=np.float32)
            if arr.shape != shape:
                raise FormatError(f"extractor parameter {name!r} has shape {arr.shape}, expected {shape}")
            self.params[name] = T.Tensor(arr.copy(), requires_grad=True)
        self.opt_state = None

    @staticmethod
    def _init_params(rng):
        params = {}
        for name, shape in PARAM_SHAPES.items():
            if name.endswith("_b") or name == "head_w":
                params[name] = np.zeros(shape, dtype=np.float32)
            else:
                fan_in = int(np.prod(shape[1:]))
                params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        return params

    def arrays(self):
        return {k: p.data for k, p in self.params.items()}

    def features(self, frames):
        """(B, 28, 28) uint8 or [0, 1] floats -> (B, 50) post-relu features."""
        x = preprocess(frames)
        p = self.params
        h = T.maxpool2(T.relu(T.conv2d(x, p["conv1_w"], p["conv1_b"])))
        h = T.maxpool2(T.relu(T.conv2d(h, p["conv2_w"], p["conv2_b"])))
        h = T.reshape(h, (h.shape[0], -1))
        return T.relu(T.linear(h, p["fc1_w"], p["fc1_b"]))

    def logits(self, frames):
        return T.linear(self.features(frames), self.params["head_w"], self.params["head_b"])


def preprocess(frames):
    arr = np.asarray(frames)
    if arr.ndim != 3 or arr.shape[1:] != (FRAME_SIDE, FRAME_SIDE):
        raise DimensionError(f"frames must be (B, 28, 28), got {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / np.float32(255.0)
    return T.Tensor(arr[:, None, :, :])


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


def build_pretrain_corpus(mnist_train, dist, seed, variants=5, n_background=30_000, chunk=8192):
    """Noisy-background frames for 11-way pretraining.

    Every MNIST training image is composited onto ``variants`` fresh noise
    frames (labels 0-9), followed by ``n_background`` digit-free frames
    (label 10).
    """
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(2,)))
    n_digit = len(mnist_train) * variants
    total = n_digit + n_background
    frames = np.empty((total, FRAME_SIDE, FRAME_SIDE), dtype=np.uint8)
    for start in range(0, total, chunk):
        stop = min(start + chunk, total)
        frames[start:stop] = sample_noise(dist, rng, (stop - start, FRAME_SIDE, FRAME_SIDE))
    digits = np.repeat(mnist_train.images, variants, axis=0)
    np.maximum(frames[:n_digit], digits, out=frames[:n_digit])
    labels = np.concatenate([np.repeat(mnist_train.labels.astype(np.int64), variants), np.full(n_background, BACKGROUND_CLASS)])
    return frames, labels


def frame_accuracy(model, frames, labels, batch_size=2048):
    correct = 0
    for start in range(0, len(frames), batch_size):
        logits = model.logits(frames[start:start + batch_size]).data
        correct += int((logits.argmax(axis=1) == labels[start:start + batch_size]).sum())
    return correct / max(len(frames), 1)


def pretrain(frames, labels, epochs=10, lr=1e-3, batch_size=128, seed=0, eval_set=None, progress=None):
    """Train the frame classifier with Adam. Returns (model, history).

    ``history`` holds ``initial_loss`` (first minibatch, before any update) and
    one dict per epoch with mean training loss, training accuracy and, when
    ``eval_set`` is given, held-out accuracy.
    """
    if epochs < 0 or batch_size < 1:
        raise ConfigError("epochs must be >= 0 and batch_size >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(3,)))
    model = FrameCNN(rng=rng)
    opt = Adam(model.params, lr=lr)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    history = {"initial_loss": None, "epochs": []}
    for epoch in range(epochs):
        order = rng.permutation(n)
        loss_sum = correct = 0.0
        for step, start in enumerate(range(0, n, batch_size)):
            idx = np.sort(order[start:start + batch_size])
            logits = model.logits(frames[idx])
            loss = T.cross_entropy(logits, labels[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"pretraining diverged in epoch {epoch}", epoch=epoch)
            if history["initial_loss"] is None:
                history["initial_loss"] = value
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += value * len(idx)
            correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
            if progress and step % 200 == 0:
                progress(epoch, start, n)
        record = {"epoch": epoch + 1, "loss": loss_sum / max(n, 1), "train_acc": correct / max(n, 1)}
        if eval_set is not None:
            record["eval_acc"] = frame_accuracy(model, *eval_set)
        logger.info("pretrain epoch %d: %s", epoch + 1, record)
        history["epochs"].append(record)
    model.opt_state = opt.state
    return model, history


# ---------------------------------------------------------------------------
# feature extraction and FMFT caches
# ---------------------------------------------------------------------------


def extract_features(model, videos, batch_videos=64, progress=None):
    """(n, 25, 28, 28) uint8 videos -> (n, 25, 50) float32 local feature sets."""
    videos = np.asarray(videos) if not isinstance(videos, np.memmap) else videos
    if videos.ndim != 4 or videos.shape[2:] != (FRAME_SIDE, FRAME_SIDE):
        raise FormatError(f"videos must be (n, L, 28, 28), got {videos.shape}")
    n, length = videos.shape[:2]
    out = np.empty((n, length, FEATURE_DIM), dtype=np.float32)
    for start in range(0, n, batch_videos):
        chunk = np.asarray(videos[start:start + batch_videos])
        frames = chunk.reshape(-1, FRAME_SIDE, FRAME_SIDE)
        out[start:start + len(chunk)] = model.features(frames).data.reshape(len(chunk), length, FEATURE_DIM)
        if progress:
            progress(start + len(chunk), n)
    return out


@dataclass
class FeatureCache:
    features: np.ndarray  # (n, L, M) float32
    labels: np.ndarray  # (n,) int64
    version: int = FMFT_VERSION

    def __len__(self):
        return len(self.labels)

    @property
    def length(self):
        return self.features.shape[1]

    @property
    def dim(self):
        return self.features.shape[2]


def _fmft_record(length, dim):
    return np.dtype([("label", "<u2"), ("features", "<f4", (length, dim))])


def write_features(path, features, labels):
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 3:
        raise DimensionError(f"feature cache needs (n, L, M) features, got {features.shape}")
    if len(features) != len(labels):
        raise DimensionError(f"{len(features)} feature sets but {len(labels)} labels")
    n, length, dim = features.shape
    records = np.zeros(n, dtype=_fmft_record(length, dim))
    records["label"] = labels
    records["features"] = features
    try:
        with open(path, "wb") as fh:
            fh.write(FMFT_HEADER.pack(FMFT_MAGIC, FMFT_VERSION, n, length, dim))
            fh.write(records.tobytes())
    except OSError as exc:
        raise StorageError(f"cannot write feature cache {path}: {exc}") from exc


def read_features(path):
    try:
        size = os.path.getsize(path)
        with open(path, "rb") as fh:
            header = fh.read(FMFT_HEADER.size)
    except OSError as exc:
        raise StorageError(f"cannot read feature cache {path}: {exc}") from exc
    if len(header) < FMFT_HEADER.size:
        raise FormatError(f"{path}: truncated FMFT header")
    magic, version, count, length, dim = FMFT_HEADER.unpack(header)
    if magic != FMFT_MAGIC:
        raise FormatError(f"{path}: not an FMFT feature cache (magic {magic!r})")
    if version != FMFT_VERSION:
        raise FormatError(f"{path}: unsupported FMFT version {version}")
    record = _fmft_record(length, dim)
    if size != FMFT_HEADER.size + count * record.itemsize:
        raise FormatError(f"{path}: header declares {count} samples but file size is {size} bytes")
    records = np.fromfile(path, dtype=record, offset=FMFT_HEADER.size, count=count)
    return FeatureCache(np.ascontiguousarray(records["features"]), records["label"].astype(np.int64), version)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def extractor_checkpoint(model, history=None, config=None, seed=0):
    state = dict(model.opt_state or {})
    if state:
        state["kind"] = "adam"
    history = history or {"initial_loss": None, "epochs": []}
    return Checkpoint("extractor", dict(config or {}), {k: v.copy() for k, v in model.arrays().items()}, state,
                      len(history["epochs"]), [dict(r) for r in history["epochs"]], int(seed))


def save_extractor(path, model, history=None, config=None, seed=0):
    ckpt_io.save(extractor_checkpoint(model, history, config, seed), path)


def load_extractor(path_or_ckpt):
    ckpt = path_or_ckpt if isinstance(path_or_ckpt, Checkpoint) else ckpt_io.load(path_or_ckpt)
    if ckpt.kind != "extractor":
        raise FormatError(f"expected an extractor checkpoint, got kind {ckpt.kind!r}")
    return FrameCNN(ckpt.params)
