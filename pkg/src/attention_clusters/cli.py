"""``attention-clusters`` command line.

Settings resolve in three layers: built-in defaults, then ``--config FILE``,
then explicit flags. Each subcommand writes the resolved configuration next
to its outputs. Progress goes to stderr; results go to files or stdout.

Failures print one line ``error[<category>]: <message>`` to stderr and exit
with 2 (usage or configuration), 3 (data, format or storage), 4 (training
divergence) or 1 (a failed ``verify`` property).
"""

import argparse
import json
import logging
import os
import sys

from . import ablation, checkpoint as ckpt_io
from . import extractor as ex
from . import flashmnist as fm
from .config import DATA_DIR_ENV, RunConfig
from .errors import AttentionClustersError, ConfigError
from .training import evaluate, train_cluster

logger = logging.getLogger("attention_clusters")

EXIT_VERIFY_FAILED = 1
EXIT_USAGE = 2
EXIT_STORAGE = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _on_off(value):
    low = value.lower()
    if low in ("on", "true", "yes", "1"):
        return True
    if low in ("off", "false", "no", "0"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {value!r}")


def _int_list(value):
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}") from None


def _str_list(value):
    return [v.strip().lower() for v in value.split(",") if v.strip()]


# flag -> (config key, argparse kwargs); shared between subcommands
FLAGS = {
    "--mnist-dir": ("mnist_dir", dict(help=f"directory holding the MNIST IDX files (default: ${DATA_DIR_ENV}/mnist or data/mnist)")),
    "--seed": ("seed", dict(type=int, help="random seed")),
    "--count": ("train_count", dict(type=int, metavar="N", help="number of videos to generate")),
    "--stratified": ("stratified", dict(type=_on_off, metavar="on|off", help="cycle categories (index mod 1024) instead of sampling them")),
    "--epochs": ("epochs", dict(type=int, help="training epochs")),
    "--lr": ("lr", dict(type=float, help="learning rate")),
    "--batch-size": ("batch_size", dict(type=int, help="minibatch size")),
    "--pretrain-epochs": ("pretrain_epochs", dict(type=int, help="extractor pretraining epochs")),
    "--pretrain-lr": ("pretrain_lr", dict(type=float, help="extractor learning rate")),
    "--pretrain-batch": ("pretrain_batch", dict(type=int, help="extractor minibatch size")),
    "--variants": ("pretrain_variants", dict(type=int, help="noisy copies of each MNIST training digit")),
    "--background": ("pretrain_background", dict(type=int, help="number of digit-free noise frames")),
    "--weighting": ("weighting", dict(choices=["average", "fc1", "fc2"], help="weighting function")),
    "--n-units": ("n_units", dict(type=int, help="cluster size N")),
    "--shifting": ("shifting", dict(type=_on_off, metavar="on|off", help="shifting operation")),
    "--fc2-hidden": ("fc2_hidden", dict(type=int, help="hidden width H of the fc2 weighting")),
    "--column-split": ("column_split", dict(type=_int_list, metavar="M1,M2,...", help="split feature columns into modalities")),
    "--optimizer": ("optimizer", dict(choices=["adam", "rmsprop"], help="optimizer")),
    "--clip-l2": ("clip_l2", dict(type=float, help="global gradient l2-norm clip")),
    "--dropout-p": ("dropout_p", dict(type=float, help="dropout probability")),
    "--subset-size": ("subset_size", dict(type=int, help="train on random subsets of this many local features")),
    "--balance": ("balance", dict(type=_on_off, metavar="on|off", help="class-balanced sampling (weight 1/S)")),
    "--classifier-hidden": ("classifier_hidden", dict(type=int, help="width of the classifier hidden layer (0: none)")),
    "--n-classes": ("n_classes", dict(type=int, help="number of classes")),
    "--sizes": ("ablate_sizes", dict(type=_int_list, metavar="N1,N2,...", help="cluster sizes of the grid")),
    "--weightings": ("ablate_weightings", dict(type=_str_list, metavar="W1,W2,...", help="weighting functions of the grid")),
    "--jobs": ("jobs", dict(type=int, help="concurrent training runs")),
    "--train-features": ("train_features", dict(help="training feature cache (FMFT)")),
    "--test-features": ("test_features", dict(help="test feature cache (FMFT)")),
    "--samples": ("visualize_samples", dict(type=int, help="number of test samples to render")),
}

TRAINING_FLAGS = ["--seed", "--weighting", "--n-units", "--shifting", "--fc2-hidden", "--column-split", "--optimizer",
                  "--lr", "--clip-l2", "--dropout-p", "--epochs", "--batch-size", "--subset-size", "--balance",
                  "--classifier-hidden", "--n-classes"]


def _add(parser, *names):
    for name in names:
        key, kwargs = FLAGS[name]
        parser.add_argument(name, dest=key, default=None, **kwargs)


def build_parser():
    parser = _Parser(prog="attention-clusters", description="Attention clusters on Flash-MNIST.")
    parser.add_argument("-q", "--quiet", action="store_true", help="suppress progress output on stderr")
    parser.add_argument("-v", "--verbose", action="store_true", help="log library messages at INFO level")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key = value configuration file")
        # also accepted after the subcommand; SUPPRESS keeps the global value otherwise
        p.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS, help="suppress progress output")
        p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="log at INFO level")
        return p

    p = command("generate", "Generate a Flash-MNIST split (FMNV file plus manifest).")
    p.add_argument("--split", required=True, choices=sorted(fm.SPLITS), help="which MNIST split digits come from")
    p.add_argument("--out", required=True, help="output FMNV path")
    _add(p, "--count", "--seed", "--stratified", "--mnist-dir")

    p = command("pretrain", "Pretrain the frame CNN on noisy MNIST frames.")
    p.add_argument("--out", required=True, help="output extractor checkpoint")
    _add(p, "--seed", "--pretrain-epochs", "--pretrain-lr", "--pretrain-batch", "--variants", "--background", "--mnist-dir")

    p = command("extract", "Extract 50-d local features for every frame of a dataset.")
    p.add_argument("--ckpt", required=True, help="extractor checkpoint")
    p.add_argument("--data", required=True, help="FMNV dataset")
    p.add_argument("--out", required=True, help="output FMFT feature cache")

    p = command("train", "Train an attention-cluster classifier on feature caches.")
    p.add_argument("--out", required=True, help="output directory")
    _add(p, "--train-features", "--test-features", *TRAINING_FLAGS)

    p = command("eval", "Evaluate a cluster checkpoint; prints a JSON report.")
    p.add_argument("--ckpt", required=True, help="cluster checkpoint")
    p.add_argument("--features", required=True, nargs="+", help="feature cache(s), one per modality")

    p = command("ablate", "Run the cluster-size / weighting / shifting grid.")
    p.add_argument("--out", required=True, help="output directory")
    _add(p, "--train-features", "--test-features", "--sizes", "--weightings", "--jobs", *TRAINING_FLAGS)

    p = command("visualize", "Export attention weight maps of test samples.")
    p.add_argument("--ckpt", required=True, help="cluster checkpoint")
    p.add_argument("--features", required=True, help="feature cache of the samples")
    p.add_argument("--data", help="FMNV dataset aligned with the features, for frame renderings")
    p.add_argument("--indices", type=_int_list, metavar="I1,I2,...", help="explicit sample indices")
    p.add_argument("--out", required=True, help="output directory")
    _add(p, "--samples")

    p = sub.add_parser("verify", help="Run the fast invariant suite.", description="Run the fast invariant suite.")
    p.add_argument("--ckpt", help="also round-trip this checkpoint file")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--instances", type=int, default=5, help="random instances per gradient check")
    return parser


def resolve_config(args):
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {key: getattr(args, key) for key, _ in FLAGS.values() if getattr(args, key, None) is not None}
    return cfg.replace(**overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _progress(label, quiet):
    if quiet:
        return None

    def report(done, total):
        print(f"\r{label}: {done}/{total}", end="" if done < total else "\n", file=sys.stderr, flush=True)

    return report


def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def cmd_generate(args, cfg):
    _ensure_parent(args.out)
    mnist_train = fm.load_mnist_split(cfg.mnist_dir, "train")
    pool = mnist_train if args.split == "train" else fm.load_mnist_split(cfg.mnist_dir, "test")
    dist = fm.build_noise_distribution(mnist_train)
    count = cfg.train_count if args.train_count is not None or args.split == "train" else cfg.test_count
    manifest = fm.generate_dataset(args.out, args.split, count, cfg.seed, pool, dist, cfg.stratified,
                                   progress=_progress("generate", args.quiet))
    cfg.replace(train_data=args.out if args.split == "train" else cfg.train_data,
                test_data=args.out if args.split == "test" else cfg.test_data).save(args.out + ".config")
    print(json.dumps({"path": args.out, "split": args.split, "count": manifest.count, "seed": manifest.seed}))
    return 0


def cmd_pretrain(args, cfg):
    _ensure_parent(args.out)
    mnist_train = fm.load_mnist_split(cfg.mnist_dir, "train")
    dist = fm.build_noise_distribution(mnist_train)
    frames, labels = ex.build_pretrain_corpus(mnist_train, dist, cfg.seed, cfg.pretrain_variants, cfg.pretrain_background)
    eval_set = None
    try:
        mnist_test = fm.load_mnist_split(cfg.mnist_dir, "test")
        eval_set = ex.build_pretrain_corpus(mnist_test, dist, cfg.seed + 1, 1, cfg.pretrain_background // 10)
    except AttentionClustersError as exc:
        logger.warning("no held-out MNIST test split, skipping frame accuracy: %s", exc)

    def progress(epoch, done, total):
        if not args.quiet:
            print(f"\rpretrain epoch {epoch + 1}: {done}/{total}", end="", file=sys.stderr, flush=True)

    model, history = ex.pretrain(frames, labels, cfg.pretrain_epochs, cfg.pretrain_lr, cfg.pretrain_batch,
                                 cfg.seed, eval_set, progress)
    if not args.quiet:
        print(file=sys.stderr)
    settings = {"seed": cfg.seed, "epochs": cfg.pretrain_epochs, "lr": cfg.pretrain_lr, "batch_size": cfg.pretrain_batch,
                "variants": cfg.pretrain_variants, "background": cfg.pretrain_background,
                "initial_loss": history["initial_loss"]}
    ex.save_extractor(args.out, model, history, settings, cfg.seed)
    cfg.replace(extractor_ckpt=args.out).save(args.out + ".config")
    print(json.dumps({"path": args.out, "history": history["epochs"]}))
    return 0


def cmd_extract(args, cfg):
    _ensure_parent(args.out)
    model = ex.load_extractor(args.ckpt)
    data = fm.read_dataset(args.data)
    feats = ex.extract_features(model, data.frames, progress=_progress("extract", args.quiet))
    ex.write_features(args.out, feats, data.labels)
    cfg.replace(extractor_ckpt=args.ckpt).save(args.out + ".config")
    print(json.dumps({"path": args.out, "count": len(data), "length": feats.shape[1], "dim": feats.shape[2]}))
    return 0


def _caches(cfg, need_test=True):
    if not cfg.train_features:
        raise ConfigError("train_features is not set (use --train-features or the config file)")
    train = [ex.read_features(cfg.train_features)]
    test = None
    if cfg.test_features:
        test = [ex.read_features(cfg.test_features)]
    elif need_test:
        raise ConfigError("test_features is not set (use --test-features or the config file)")
    return train, test


def _epoch_printer(quiet):
    if quiet:
        return None

    def report(record):
        text = " ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in record.items() if k != "seconds")
        print(text, file=sys.stderr, flush=True)

    return report


def cmd_train(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    train, test = _caches(cfg, need_test=False)
    dims = cfg.column_split or [train[0].dim]
    cluster_cfgs = [cfg.cluster_config(d) for d in dims]
    best, final = train_cluster(train, cfg.train_config(), cluster_cfgs, test, cfg.column_split, _epoch_printer(args.quiet))
    ckpt_io.save(best, os.path.join(args.out, "best.ackp"))
    ckpt_io.save(final, os.path.join(args.out, "final.ackp"))
    ablation.write_curve(os.path.join(args.out, "curve.csv"),
                         [{k: r.get(k, 0.0) for k in ablation.CURVE_COLUMNS} for r in final.history])
    cfg.replace(out_dir=args.out).save(os.path.join(args.out, "run.config"))
    last = final.history[-1] if final.history else {}
    print(json.dumps({"best_epoch": best.epoch, "best_test_acc": best.history[best.epoch - 1].get("test_acc") if best.epoch else None,
                      "final_test_acc": last.get("test_acc"), "epochs": final.epoch}))
    return 0


def cmd_eval(args, cfg):
    caches = [ex.read_features(p) for p in args.features]
    report = evaluate(args.ckpt, caches)
    print(json.dumps(report.summary()))
    return 0


def cmd_ablate(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    train, test = _caches(cfg)
    cfg.replace(out_dir=args.out).save(os.path.join(args.out, "run.config"))

    def report(row):
        if not args.quiet:
            print(f"{row['weighting']} N={row['N']} shifting={row['shifting']}: top1={row['top1']:.2f} "
                  f"(best epoch {row['best_epoch']}, {row['wallclock_s']:.0f}s)", file=sys.stderr, flush=True)

    ablation.ablation_grid(train, test, cfg.train_config(), cfg.ablate_sizes, cfg.ablate_weightings, cfg.jobs,
                           args.out, cfg.column_split, report)
    with open(os.path.join(args.out, "table1.csv")) as fh:
        sys.stdout.write(fh.read())
    return 0


def cmd_visualize(args, cfg):
    from .visualize import export_attention_maps

    cache = ex.read_features(args.features)
    indices = args.indices if args.indices is not None else list(range(min(cfg.visualize_samples, len(cache))))
    videos = fm.read_dataset(args.data).frames if args.data else None
    if videos is not None and len(videos) != len(cache):
        raise ConfigError(f"dataset has {len(videos)} videos but the feature cache has {len(cache)} sets")
    export_attention_maps(args.ckpt, [cache], indices, args.out, videos)
    cfg.replace(out_dir=args.out).save(os.path.join(args.out, "run.config"))
    print(json.dumps({"out": args.out, "samples": indices}))
    return 0


def cmd_verify(args):
    from .verify import run_verify

    results = run_verify(seed=args.seed, gradcheck_instances=args.instances, checkpoint=args.ckpt,
                         report=lambda r: print(r.line(), flush=True))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"error[verify]: {len(failed)} propert{'y' if len(failed) == 1 else 'ies'} failed: {', '.join(failed)}",
              file=sys.stderr)
        return EXIT_VERIFY_FAILED
    print(f"all {len(results)} properties passed")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "extract": cmd_extract,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "visualize": cmd_visualize,
}


def _one_line(text):
    return " ".join(str(text).split())


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error[usage]: {_one_line(exc)}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify":
            return cmd_verify(args)
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except AttentionClustersError as exc:
        print(f"error[{exc.category}]: {_one_line(exc)}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error[storage]: {_one_line(exc)}", file=sys.stderr)
        return EXIT_STORAGE


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
