"""MNIST ingestion and Flash-MNIST video synthesis.

A Flash-MNIST video is 25 noise frames whose pixels are drawn from the MNIST
training-set intensity histogram. For each digit in a randomly chosen subset of
{0..9}, one or two MNIST images of that digit are max-composited onto randomly
chosen frames. The label is the subset as a 10-bit mask (1024 classes).

Every sample is generated from its own RNG seeded by ``(seed, split, index)``,
so any contiguous or scattered range of indices can be generated independently
and still reproduce the same bytes as a serial run.
"""

import gzip
import os
import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigError, ConsistencyError, DataError, FormatError, StorageError

N_FRAMES = 25
FRAME_SIDE = 28
FRAME_PIXELS = FRAME_SIDE * FRAME_SIDE
N_DIGITS = 10
N_CLASSES = 2 ** N_DIGITS

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

FMNV_MAGIC = b"FMNV"
FMNV_VERSION = 1
FMNV_HEADER = struct.Struct("<4sIQQ")
FMNV_RECORD = np.dtype([("label", "<u2"), ("frames", "u1", (N_FRAMES, FRAME_SIDE, FRAME_SIDE))])

SPLITS = {"train": 0, "test": 1}
CANONICAL_COUNTS = {"train": 102_400, "test": 10_240}

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


# ---------------------------------------------------------------------------
# MNIST IDX files
# ---------------------------------------------------------------------------


@dataclass
class MnistSet:
    """MNIST images (n, 28, 28) uint8 with their digit labels (n,)."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.images.ndim != 3 or self.images.shape[1:] != (FRAME_SIDE, FRAME_SIDE):
            raise FormatError(f"MNIST images must be (n, 28, 28), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ConsistencyError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and self.labels.max() >= N_DIGITS:
            raise FormatError("MNIST labels must be digits 0-9")

    def __len__(self):
        return len(self.labels)

    @cached_property
    def by_digit(self):
        return [np.flatnonzero(self.labels == d) for d in range(N_DIGITS)]


def _read_bytes(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    try:
        with opener(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc


def read_idx(path, expected_magic):
    """Parse a big-endian IDX file into a uint8 array."""
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    expected = int(np.prod(dims))
    if len(raw) - header_len != expected:
        raise FormatError(f"{path}: expected {expected} data bytes for dims {dims}, found {len(raw) - header_len}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header_len).reshape(dims)


def write_idx(path, array):
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x0800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_mnist(images_path, labels_path):
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(f"{images_path} holds {images.shape[0]} images but {labels_path} holds {labels.shape[0]} labels")
    return MnistSet(images, labels)


def load_mnist_split(mnist_dir, split):
    """Load ``train`` or ``test`` from a directory holding the standard file names
    (optionally gzipped)."""
    if split not in MNIST_FILES:
        raise ConfigError(f"unknown split {split!r}")
    paths = []
    for name in MNIST_FILES[split]:
        path = os.path.join(mnist_dir, name)
        if not os.path.exists(path) and os.path.exists(path + ".gz"):
            path += ".gz"
        paths.append(path)
    return load_mnist(*paths)


# ---------------------------------------------------------------------------
# noise model and sample synthesis
# ---------------------------------------------------------------------------


def build_noise_distribution(images):
    """Empirical distribution of the 256 pixel intensities over ``images``."""
    images = np.asarray(images.images if isinstance(images, MnistSet) else images, dtype=np.uint8)
    if images.size == 0:
        raise ConfigError("noise distribution needs at least one image")
    counts = np.bincount(images.ravel(), minlength=256).astype(np.float64)
    return counts / counts.sum()


def sample_noise(dist, rng, shape=(N_FRAMES, FRAME_SIDE, FRAME_SIDE)):
    return rng.choice(256, size=shape, p=dist).astype(np.uint8)


@dataclass
class VideoSample:
    frames: np.ndarray
    label: int


def digits_of(mask):
    return [d for d in range(N_DIGITS) if mask >> d & 1]


def generate_sample(category, pool, dist, rng):
    """One video for the digit set ``category`` (a 10-bit mask).

    Each digit of the set contributes one or two distinct pool images (even
    odds), each max-composited onto a frame chosen uniformly with replacement.
    """
    if not 0 <= category < N_CLASSES:
        raise ConfigError(f"category must lie in [0, {N_CLASSES}), got {category}")
    frames = sample_noise(dist, rng)
    for digit in digits_of(category):
        candidates = pool.by_digit[digit]
        if len(candidates) == 0:
            raise DataError(f"image pool has no example of digit {digit}")
        count = min(int(rng.integers(1, 3)), len(candidates))
        chosen = rng.choice(candidates, size=count, replace=False)
        targets = rng.integers(0, N_FRAMES, size=count)
        for image_index, frame_index in zip(chosen, targets):
            np.maximum(frames[frame_index], pool.images[image_index], out=frames[frame_index])
    return VideoSample(frames, int(category))


def sample_rng(seed, split, index):
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(SPLITS[split], int(index))))


def generate_samples(indices, split, seed, pool, dist, stratified=False):
    """Records for the given sample indices, as a structured FMNV array."""
    indices = np.asarray(indices, dtype=np.int64)
    out = np.zeros(len(indices), dtype=FMNV_RECORD)
    for row, index in enumerate(indices):
        rng = sample_rng(seed, split, index)
        category = int(index % N_CLASSES) if stratified else int(rng.integers(N_CLASSES))
        sample = generate_sample(category, pool, dist, rng)
        out[row]["label"] = sample.label
        out[row]["frames"] = sample.frames
    return out


# ---------------------------------------------------------------------------
# FMNV dataset files and manifests
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    split: str
    count: int
    seed: int
    format_version: int = FMNV_VERSION
    stratified: bool = False
    class_counts: np.ndarray = field(default_factory=lambda: np.zeros(N_CLASSES, dtype=np.int64))

    def to_text(self):
        lines = [
            "format=FMNV",
            f"format_version={self.format_version}",
            f"split={self.split}",
            f"count={self.count}",
            f"seed={self.seed}",
            f"stratified={str(self.stratified).lower()}",
            "class_counts=" + ",".join(str(int(c)) for c in self.class_counts),
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        fields = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        try:
            return cls(
                split=fields["split"],
                count=int(fields["count"]),
                seed=int(fields["seed"]),
                format_version=int(fields["format_version"]),
                stratified=fields.get("stratified", "false") == "true",
                class_counts=np.array([int(c) for c in fields["class_counts"].split(",")], dtype=np.int64),
            )
        except (KeyError, ValueError) as exc:
            raise FormatError(f"malformed dataset manifest: {exc}") from exc


def manifest_path(path):
    return str(path) + ".manifest"


def generate_dataset(path, split, n_samples, seed, pool, dist, stratified=False, chunk=512, progress=None):
    """Write ``n_samples`` Flash-MNIST videos to ``path`` (FMNV) plus a manifest.

    ``pool`` must be the MNIST split matching ``split``: training videos draw
    digits from MNIST train, test videos from MNIST test.
    """
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {sorted(SPLITS)}, got {split!r}")
    if n_samples < 0:
        raise ConfigError("sample count must be non-negative")
    class_counts = np.zeros(N_CLASSES, dtype=np.int64)
    try:
        with open(path, "wb") as fh:
            fh.write(FMNV_HEADER.pack(FMNV_MAGIC, FMNV_VERSION, n_samples, seed))
            for start in range(0, n_samples, chunk):
                records = generate_samples(range(start, min(start + chunk, n_samples)), split, seed, pool, dist, stratified)
                class_counts += np.bincount(records["label"], minlength=N_CLASSES)
                fh.write(records.tobytes())
                if progress:
                    progress(min(start + chunk, n_samples), n_samples)
        manifest = DatasetManifest(split, n_samples, seed, FMNV_VERSION, stratified, class_counts)
        with open(manifest_path(path), "w") as fh:
            fh.write(manifest.to_text())
    except OSError as exc:
        raise StorageError(f"cannot write dataset {path}: {exc}") from exc
    return manifest


@dataclass
class FlashMnistDataset:
    frames: np.ndarray  # (n, 25, 28, 28) uint8
    labels: np.ndarray  # (n,) int64
    seed: int
    version: int = FMNV_VERSION

    def __len__(self):
        return len(self.labels)


def write_dataset(path, frames, labels, seed=0):
    frames = np.asarray(frames, dtype=np.uint8)
    records = np.zeros(len(frames), dtype=FMNV_RECORD)
    records["label"] = labels
    records["frames"] = frames
    with open(path, "wb") as fh:
        fh.write(FMNV_HEADER.pack(FMNV_MAGIC, FMNV_VERSION, len(records), seed))
        fh.write(records.tobytes())


def read_dataset(path, mmap=True):
    try:
        size = os.path.getsize(path)
        with open(path, "rb") as fh:
            header = fh.read(FMNV_HEADER.size)
    except OSError as exc:
        raise StorageError(f"cannot read dataset {path}: {exc}") from exc
    if len(header) < FMNV_HEADER.size:
        raise FormatError(f"{path}: truncated FMNV header")
    magic, version, count, seed = FMNV_HEADER.unpack(header)
    if magic != FMNV_MAGIC:
        raise FormatError(f"{path}: not an FMNV dataset (magic {magic!r})")
    if version != FMNV_VERSION:
        raise FormatError(f"{path}: unsupported FMNV version {version}")
    if size != FMNV_HEADER.size + count * FMNV_RECORD.itemsize:
        raise FormatError(f"{path}: header declares {count} samples but file size is {size} bytes")
    if count == 0:
        records = np.zeros(0, dtype=FMNV_RECORD)
    elif mmap:
        records = np.memmap(path, dtype=FMNV_RECORD, mode="r", offset=FMNV_HEADER.size, shape=(count,))
    else:
        records = np.fromfile(path, dtype=FMNV_RECORD, offset=FMNV_HEADER.size, count=count)
    return FlashMnistDataset(records["frames"], records["label"].astype(np.int64), seed, version)
