"""Fast invariant suite behind ``attention-clusters verify``.

Each property returns ``(passed, detail)``; ``run_verify`` collects them into
``PropertyResult`` records. Nothing here needs the MNIST files or a trained
model, so the suite runs anywhere in well under a minute.
"""

import os
import tempfile
import time
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt_io
from . import flashmnist as fm
from . import tensor as T
from .clusters import ClusterConfig, AttentionCluster, MultimodalClusters
from .config import RunConfig
from .errors import AttentionClustersError
from .extractor import read_features, write_features
from .gradcheck import FD_TOLERANCE, GRADCHECK_CASES, gradcheck_op
from .model import ClusterModel
from .training import TrainConfig, model_checkpoint, model_from_checkpoint


@dataclass
class PropertyResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}" + (f": {self.detail}" if self.detail else "")


# ---------------------------------------------------------------------------
# structural properties of attention clusters
# ---------------------------------------------------------------------------


def _random_clusters(rng, dim=6, shifting=None):
    for weighting in ("average", "fc1", "fc2"):
        n = int(rng.integers(1, 6))
        shift = bool(rng.integers(0, 2)) if shifting is None else shifting
        cfg = ClusterConfig(weighting, n, shift, hidden=3, dim=dim)
        yield AttentionCluster(cfg, rng=rng)


def prop_weight_simplex(rng, trials):
    worst = 0.0
    for _ in range(trials):
        for cluster in _random_clusters(rng):
            X = rng.normal(scale=3.0, size=(4, int(rng.integers(1, 30)), 6))
            a = cluster.weights(X).data.astype(np.float64)
            if (a < 0).any():
                return False, f"negative weight for {cluster.cfg.weighting}"
            worst = max(worst, float(np.abs(a.sum(axis=-1) - 1.0).max()))
    return worst <= 1e-6, f"max |sum(a) - 1| = {worst:.2e}"


def prop_permutation_invariance(rng, trials):
    worst = 0.0
    for _ in range(trials):
        for cluster in _random_clusters(rng):
            X = rng.normal(size=(3, int(rng.integers(2, 30)), 6))
            perm = rng.permutation(X.shape[1])
            g1, g2 = cluster.forward(X).data, cluster.forward(X[:, perm]).data
            worst = max(worst, float(np.abs(g1 - g2).max()))
    return worst <= 1e-5, f"max |g(X) - g(PX)| = {worst:.2e}"


def prop_unit_norms(rng, trials):
    worst = 0.0
    for _ in range(trials):
        for cluster in _random_clusters(rng, shifting=True):
            n = cluster.cfg.n_units
            X = rng.normal(size=(3, int(rng.integers(1, 30)), 6))
            v = cluster.forward(X).data.reshape(3, n, 6).astype(np.float64)
            worst = max(worst, float(np.abs(np.linalg.norm(v, axis=-1) - 1 / np.sqrt(n)).max()))
            worst = max(worst, float(np.abs(np.linalg.norm(v.reshape(3, -1), axis=-1) - 1).max()))
    return worst <= 1e-5, f"max norm deviation = {worst:.2e}"


def prop_multimodal_blocks(rng, trials):
    for _ in range(trials):
        dims = [int(d) for d in rng.integers(2, 8, size=int(rng.integers(2, 4)))]
        cfgs = [ClusterConfig(str(rng.choice(["fc1", "fc2", "average"])), int(rng.integers(1, 5)), True, 3, d) for d in dims]
        mm = MultimodalClusters.build(cfgs, rng=rng)
        xs = [rng.normal(size=(2, int(rng.integers(1, 10)), d)) for d in dims]
        g = mm.forward(xs).data
        expected = sum(c.n_units * c.dim for c in cfgs)
        if g.shape != (2, expected):
            return False, f"concatenated width {g.shape[1]} != sum N_k*M_k = {expected}"
        start = 0
        for c in cfgs:
            block = g[:, start:start + c.output_dim]
            if np.abs(np.linalg.norm(block, axis=-1) - 1).max() > 1e-5:
                return False, "a modality block does not have unit norm"
            start += c.output_dim
    return True, "widths and block norms correct"


def prop_shift_scale_invariance(rng, trials):
    worst = 0.0
    for _ in range(trials):
        cfg = ClusterConfig(str(rng.choice(["fc1", "fc2"])), int(rng.integers(1, 5)), True, 3, 5)
        cluster = AttentionCluster(cfg, rng=rng)
        X = rng.normal(size=(2, 7, 5))
        base = cluster.forward(X).data
        c = float(rng.uniform(0.1, 10.0))
        params = {k: t.data * (c if k.endswith(("alpha", "beta")) else 1.0) for k, t in cluster.params.items()}
        scaled = AttentionCluster(cfg, params=params).forward(X).data
        worst = max(worst, float(np.abs(base - scaled).max()))
    return worst <= 1e-5, f"max |g(a,b) - g(ca,cb)| = {worst:.2e}"


def prop_variable_length(rng, trials):
    model = ClusterModel([ClusterConfig("fc1", 4, True, dim=5)], n_classes=7, classifier_hidden=8, rng=rng)
    for _ in range(trials):
        for length in (1, 3, 25, 60):
            logits = model.forward([rng.normal(size=(2, length, 5))]).data
            if logits.shape != (2, 7) or not np.isfinite(logits).all():
                return False, f"bad output for L={length}"
        X = rng.normal(size=(1, 5, 5))
        doubled = np.concatenate([X, X], axis=1)
        if np.abs(model.forward([X]).data - model.forward([doubled]).data).max() > 1e-5:
            return False, "duplicating every local feature changed the output"
    return True, "L in {1, 3, 25, 60} accepted; duplicated sets agree"


# ---------------------------------------------------------------------------
# format round-trips
# ---------------------------------------------------------------------------


def prop_idx_roundtrip(rng, tmp):
    arr = rng.integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
    path = os.path.join(tmp, "images.idx")
    fm.write_idx(path, arr)
    back = fm.read_idx(path, fm.IDX_IMAGES_MAGIC)
    return bool(np.array_equal(arr, back)), "IDX images"


def prop_fmnv_roundtrip(rng, tmp):
    frames = rng.integers(0, 256, size=(3, fm.N_FRAMES, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, fm.N_CLASSES, size=3)
    path = os.path.join(tmp, "videos.fmnv")
    fm.write_dataset(path, frames, labels, seed=7)
    ds = fm.read_dataset(path)
    ok = np.array_equal(ds.frames, frames) and np.array_equal(ds.labels, labels) and ds.seed == 7
    return bool(ok), "FMNV videos"


def prop_fmft_roundtrip(rng, tmp):
    feats = rng.normal(size=(4, 25, 50)).astype(np.float32)
    labels = rng.integers(0, 1024, size=4)
    path = os.path.join(tmp, "features.fmft")
    write_features(path, feats, labels)
    cache = read_features(path)
    return bool(np.array_equal(cache.features, feats) and np.array_equal(cache.labels, labels)), "FMFT features"


def _checkpoint_consistent(ckpt, rng):
    raw = ckpt_io.to_bytes(ckpt)
    again = ckpt_io.from_bytes(raw)
    if ckpt_io.to_bytes(again) != raw:
        return False, "re-serialisation differs"
    for k, v in ckpt.params.items():
        if not np.array_equal(v, again.params[k]) or v.dtype != again.params[k].dtype:
            return False, f"parameter {k!r} changed"
    if ckpt.kind == "cluster":
        model_a, model_b = model_from_checkpoint(ckpt), model_from_checkpoint(again)
        xs = [rng.normal(size=(3, 25, c.dim)).astype(np.float32) for c in model_a.cluster_cfgs]
        if not np.array_equal(model_a.forward(xs).data, model_b.forward(xs).data):
            return False, "reloaded model gives different outputs"
    return True, "bit-identical"


def prop_checkpoint_roundtrip(rng, tmp):
    cfg = TrainConfig(epochs=0, n_classes=6, classifier_hidden=4)
    model = ClusterModel([ClusterConfig("fc2", 3, True, 4, 5), ClusterConfig("fc1", 2, False, dim=3)], 6, 4, rng=rng)
    ckpt = model_checkpoint(model, cfg, 0, [{"epoch": 1, "loss": 1.5}])
    path = os.path.join(tmp, "model.ackp")
    ckpt_io.save(ckpt, path)
    return _checkpoint_consistent(ckpt_io.load(path), rng)


def prop_config_roundtrip(rng, tmp):
    cfg = RunConfig(seed=int(rng.integers(100)), shifting=False, clip_l2=5.0, column_split=[25, 25])
    return RunConfig.from_text(cfg.to_text()) == cfg, "run configuration text"


def check_checkpoint_file(path, rng):
    """Round-trip an existing checkpoint file; format errors count as failure."""
    try:
        return _checkpoint_consistent(ckpt_io.load(path), rng)
    except AttentionClustersError as exc:
        return False, f"{exc.category} error: {exc}"


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

STRUCTURAL = {
    "weight_simplex": prop_weight_simplex,
    "permutation_invariance": prop_permutation_invariance,
    "unit_norms": prop_unit_norms,
    "multimodal_blocks": prop_multimodal_blocks,
    "shift_scale_invariance": prop_shift_scale_invariance,
    "variable_length": prop_variable_length,
}

ROUNDTRIPS = {
    "idx_roundtrip": prop_idx_roundtrip,
    "fmnv_roundtrip": prop_fmnv_roundtrip,
    "fmft_roundtrip": prop_fmft_roundtrip,
    "checkpoint_roundtrip": prop_checkpoint_roundtrip,
    "config_roundtrip": prop_config_roundtrip,
}


def _timed(name, fn, *args):
    started = time.perf_counter()
    try:
        passed, detail = fn(*args)
    except Exception as exc:  # a property that crashes is a failed property
        passed, detail = False, f"{type(exc).__name__}: {exc}"
    return PropertyResult(name, bool(passed), detail, time.perf_counter() - started)


def run_verify(seed=0, gradcheck_instances=5, trials=10, checkpoint=None, report=None):
    """Run every property; ``report`` is called with each result as it finishes."""
    results = []

    def record(result):
        results.append(result)
        if report:
            report(result)

    for name in GRADCHECK_CASES:
        def check(name=name):
            err = gradcheck_op(name, gradcheck_instances, seed)
            return err < FD_TOLERANCE, f"max relative error {err:.2e}"
        record(_timed(f"gradcheck[{name}]", check))
    for name, fn in STRUCTURAL.items():
        record(_timed(name, fn, np.random.default_rng([seed, len(results)]), trials))
    with tempfile.TemporaryDirectory() as tmp:
        for name, fn in ROUNDTRIPS.items():
            record(_timed(name, fn, np.random.default_rng([seed, len(results)]), tmp))
    if checkpoint is not None:
        record(_timed(f"checkpoint_file[{checkpoint}]", check_checkpoint_file, checkpoint, np.random.default_rng(seed)))
    return results
