"""Attention-map export: per-unit weight matrices and weight-modulated frames.

For every requested sample and modality we write

* ``sample<i>_m<k>_weights.csv``: an N x L matrix, one row per attention unit,
* ``sample<i>_m<k>.pgm``: a binary graymap. The top strip shows the L frames
  (or, without raw videos, a flat gray tile per position); each of the N
  strips below repeats them with brightness scaled by that unit's weight,
  normalised so the unit's largest weight renders at full intensity.
"""

import csv
import os

import numpy as np

from .checkpoint import Checkpoint
from . import checkpoint as ckpt_io
from .errors import ConfigError, DimensionError
from .training import model_from_checkpoint, modality_inputs

TILE = 28
GAP = 2


def attention_maps(model, inputs):
    """Per-modality weight arrays (n, N_k, L) for a batch of inputs."""
    _, weights = model.global_features(inputs, return_weights=True)
    return [w.data.astype(np.float64) for w in weights]


def write_pgm(path, image):
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 2:
        raise DimensionError(f"graymap must be 2-d, got {image.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise ConfigError(f"{path}: not a binary graymap")
    width, height = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=width * height).reshape(height, width)


def render(weights, frames=None):
    """Grayscale strip image for an (N, L) weight matrix and optional (L, 28, 28) frames."""
    n_units, length = weights.shape
    if frames is None:
        frames = np.full((length, TILE, TILE), 255, dtype=np.uint8)
    elif frames.shape[0] != length:
        raise DimensionError(f"{frames.shape[0]} frames for {length} attention weights")
    rows = n_units + 1
    image = np.zeros((rows * TILE + (rows - 1) * GAP, length * TILE + (length - 1) * GAP), dtype=np.uint8)

    def put(r, l, tile):
        y, x = r * (TILE + GAP), l * (TILE + GAP)
        image[y:y + TILE, x:x + TILE] = tile

    for l in range(length):
        put(0, l, frames[l])
    peak = weights.max(axis=1, keepdims=True)
    scaled = weights / np.where(peak > 0, peak, 1.0)
    for k in range(n_units):
        for l in range(length):
            put(k + 1, l, np.round(frames[l].astype(np.float64) * scaled[k, l]).astype(np.uint8))
    return image


def write_weights_csv(path, weights):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["unit"] + [f"l{j}" for j in range(weights.shape[1])])
        for k, row in enumerate(weights):
            writer.writerow([k] + [f"{v:.8f}" for v in row])


def export_attention_maps(checkpoint, caches, samples, out_dir, videos=None):
    """Write weight CSVs and graymap renderings for the given sample indices.

    ``checkpoint`` may be a Checkpoint or a path; ``videos`` optionally holds
    the raw (n, L, 28, 28) frames aligned with the caches. Returns
    ``{sample index: [per-modality (N, L) weights]}``.
    """
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = ckpt_io.load(checkpoint)
    model = model_from_checkpoint(checkpoint)
    inputs, _ = modality_inputs(caches, checkpoint.config.get("column_split"))
    samples = [int(i) for i in samples]
    n = len(inputs[0])
    bad = [i for i in samples if not 0 <= i < n]
    if bad:
        raise ConfigError(f"sample indices {bad} out of range for {n} samples")
    os.makedirs(out_dir, exist_ok=True)
    out = {}
    if not samples:
        return out
    maps = attention_maps(model, [x[samples] for x in inputs])
    for row, index in enumerate(samples):
        frames = None if videos is None else np.asarray(videos[index])
        out[index] = []
        for k, w in enumerate(maps):
            weights = w[row]
            stem = os.path.join(out_dir, f"sample{index}_m{k}")
            write_weights_csv(stem + "_weights.csv", weights)
            write_pgm(stem + ".pgm", render(weights, frames if k == 0 or frames is None else None))
            out[index].append(weights)
    return out
