import json
import math

import numpy as np
import pytest

from attention_clusters import checkpoint as ckpt_io
from attention_clusters import flashmnist as fm
from attention_clusters.cli import FLAGS, build_parser, main
from attention_clusters.config import RunConfig
from attention_clusters.extractor import read_features, write_features


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Fake MNIST directory plus tiny generated splits and random feature caches."""
    root = tmp_path_factory.mktemp("cli")
    mnist = root / "mnist"
    mnist.mkdir()
    r = np.random.default_rng(5)
    for split, n in (("train", 40), ("test", 20)):
        images_name, labels_name = fm.MNIST_FILES[split]
        fm.write_idx(mnist / images_name, r.integers(0, 256, size=(n, 28, 28), dtype=np.uint8))
        fm.write_idx(mnist / labels_name, np.arange(n, dtype=np.uint8) % 10)
    for split, n in (("train", 48), ("test", 24)):
        labels = r.integers(0, 8, size=n)
        feats = r.random((n, 6, 4)).astype(np.float32)
        feats[np.arange(n), 0, labels % 4] += 2.0
        feats[np.arange(n), 1, :] += (labels >= 4)[:, None]
        write_features(root / f"{split}.fmft", feats, labels)
    return root


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_help_lists_flags(capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--weighting", "--n-units", "--shifting", "--lr", "--clip-l2", "--dropout-p", "--subset-size",
                 "--balance", "--column-split", "--config"):
        assert flag in out
    assert all(isinstance(key, str) for key, _ in FLAGS.values())


def test_usage_errors(capsys):
    code, _, err = run(capsys, "train")
    assert code == 2 and err.startswith("error[usage]:")
    code, _, err = run(capsys, "frobnicate")
    assert code == 2
    code, _, err = run(capsys, "train", "--out", "x", "--shifting", "sometimes")
    assert code == 2 and "on/off" in err


def test_generate_and_determinism(capsys, workspace):
    out1, out2 = workspace / "a" / "tr.fmnv", workspace / "b" / "tr.fmnv"
    for out in (out1, out2):
        code, stdout, _ = run(capsys, "generate", "-q", "--split", "train", "--count", 12, "--seed", 3,
                              "--mnist-dir", workspace / "mnist", "--out", out)
        assert code == 0 and json.loads(stdout)["count"] == 12
    assert out1.read_bytes() == out2.read_bytes()
    ds = fm.read_dataset(out1)
    assert ds.frames.shape == (12, 25, 28, 28)
    assert RunConfig.load(str(out1) + ".config").train_data == str(out1)


def test_generate_zero_count(capsys, workspace):
    out = workspace / "empty.fmnv"
    code, _, _ = run(capsys, "generate", "-q", "--split", "test", "--count", 0, "--mnist-dir", workspace / "mnist",
                     "--out", out)
    assert code == 0 and len(fm.read_dataset(out)) == 0


def test_generate_missing_mnist(capsys, workspace):
    code, _, err = run(capsys, "generate", "--split", "test", "--mnist-dir", workspace / "nowhere", "--out",
                       workspace / "x.fmnv")
    assert code == 3 and err.startswith("error[")


def test_data_dir_environment(capsys, workspace, monkeypatch):
    monkeypatch.setenv("ATTNCLUSTERS_DATA", str(workspace))
    code, _, _ = run(capsys, "generate", "-q", "--split", "test", "--count", 2, "--out", workspace / "env.fmnv")
    assert code == 0


def test_pretrain_and_extract(capsys, workspace):
    ck = workspace / "ext.ackp"
    code, out, _ = run(capsys, "pretrain", "-q", "--mnist-dir", workspace / "mnist", "--pretrain-epochs", 1,
                       "--variants", 1, "--background", 20, "--out", ck)
    assert code == 0 and len(json.loads(out)["history"]) == 1
    assert ckpt_io.load(ck).kind == "extractor"
    run(capsys, "generate", "-q", "--split", "test", "--count", 3, "--mnist-dir", workspace / "mnist",
        "--out", workspace / "v.fmnv")
    code, out, _ = run(capsys, "extract", "-q", "--ckpt", ck, "--data", workspace / "v.fmnv", "--out", workspace / "v.fmft")
    assert code == 0 and json.loads(out) == {"path": str(workspace / "v.fmft"), "count": 3, "length": 25, "dim": 50}
    assert read_features(workspace / "v.fmft").features.shape == (3, 25, 50)
    code, _, err = run(capsys, "extract", "--ckpt", workspace / "train.fmft", "--data", workspace / "v.fmnv",
                       "--out", workspace / "w.fmft")
    assert code == 3 and err.startswith("error[format]")


def test_train_eval_visualize(capsys, workspace):
    cfg = workspace / "small.config"
    cfg.write_text("n_classes = 8\nclassifier_hidden = 16\nbatch_size = 16\nepochs = 3\nn_units = 2\n")
    out = workspace / "run"
    code, stdout, err = run(capsys, "train", "--config", cfg, "--train-features", workspace / "train.fmft",
                            "--test-features", workspace / "test.fmft", "--epochs", 4, "--out", out)
    assert code == 0 and "epoch=1" in err
    summary = json.loads(stdout)
    assert summary["epochs"] == 4 and 1 <= summary["best_epoch"] <= 4
    for name in ("best.ackp", "final.ackp", "curve.csv", "run.config"):
        assert (out / name).exists()
    resolved = RunConfig.load(out / "run.config")
    assert resolved.epochs == 4 and resolved.n_units == 2 and resolved.classifier_hidden == 16

    code, stdout, _ = run(capsys, "eval", "--ckpt", out / "best.ackp", "--features", workspace / "test.fmft")
    report = json.loads(stdout)
    assert code == 0 and report["n_samples"] == 24 and report["top1"] == pytest.approx(summary["best_test_acc"])

    code, stdout, _ = run(capsys, "visualize", "--ckpt", out / "best.ackp", "--features", workspace / "test.fmft",
                          "--indices", "0,5", "--out", workspace / "maps")
    assert code == 0 and (workspace / "maps" / "sample5_m0_weights.csv").exists()


def test_untrained_checkpoint_evaluates_at_chance(capsys, workspace):
    out = workspace / "zero"
    code, _, _ = run(capsys, "train", "-q", "--train-features", workspace / "train.fmft", "--epochs", 0,
                     "--n-classes", 8, "--classifier-hidden", 4, "--out", out)
    assert code == 0
    code, stdout, _ = run(capsys, "eval", "--ckpt", out / "final.ackp", "--features", workspace / "test.fmft")
    report = json.loads(stdout)
    assert report["loss"] == pytest.approx(math.log(8), abs=1e-5)
    assert report["top1"] <= 0.25


def test_train_errors(capsys, workspace):
    code, _, err = run(capsys, "train", "-q", "--out", workspace / "e1")
    assert code == 2 and err.startswith("error[config]")
    code, _, err = run(capsys, "train", "-q", "--train-features", workspace / "train.fmft", "--column-split", "3,3",
                       "--out", workspace / "e2")
    assert code != 0 and err.startswith("error[")
    bad = workspace / "bad.config"
    bad.write_text("learning_rate = 0.1\n")
    code, _, err = run(capsys, "train", "--config", bad, "--out", workspace / "e3")
    assert code == 2 and "learning_rate" in err
    nan_cache = read_features(workspace / "train.fmft")
    nan_cache.features[0, 0, 0] = np.nan
    write_features(workspace / "nan.fmft", nan_cache.features, nan_cache.labels)
    code, _, err = run(capsys, "train", "-q", "--train-features", workspace / "nan.fmft", "--n-classes", 8,
                       "--epochs", 1, "--out", workspace / "e4")
    assert code == 4 and err.startswith("error[training]")


def test_ablate(capsys, workspace):
    code, stdout, _ = run(capsys, "ablate", "-q", "--train-features", workspace / "train.fmft", "--test-features",
                          workspace / "test.fmft", "--sizes", "1,2", "--weightings", "average,fc1", "--epochs", 1,
                          "--n-classes", 8, "--classifier-hidden", 4, "--out", workspace / "grid")
    assert code == 0
    lines = stdout.strip().splitlines()
    assert lines[0] == "N,average,fc1_wo_shift,fc1_w_shift" and len(lines) == 3
    assert len(list((workspace / "grid" / "curves").iterdir())) == 6


def test_verify_command(capsys):
    code, out, _ = run(capsys, "verify", "--instances", 1)
    assert code == 0 and out.strip().endswith("properties passed")
    assert all(line.startswith(("PASS", "all")) for line in out.strip().splitlines())


def test_parser_builds():
    assert build_parser().prog == "attention-clusters"
