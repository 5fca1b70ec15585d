"""Command-line interface: ``fuzzyseg {phantom,train,infer,eval,pipeline}``."""

import argparse
import csv
import logging
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import dataset, pipeline
from .checkpoint import CheckpointError
from .config import VARIANTS, ConfigError, RunConfig, help_text, load_config
from .densecrf import ContextConstraintError
from .fcn import TrainingDivergedError, predict_proba
from .metrics import CLASS_NAMES
from .phantom import PhantomError, PhantomSpec

logger = logging.getLogger("fuzzyseg")

# settings of the desk-scale phantom experiment
SCALED_PRESET = {
    "image_size": "64",
    "width": "8",
    "depth": "2",
    "epochs": "60",
    "phantom_count": "200",
    "phantom_size": "64",
    "folds": "10",
    "fold": "0",
}


class CommandError(RuntimeError):
    pass


def _kv(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def _common(p):
    p.add_argument("--config", type=Path, help="flat 'key = value' configuration file")
    p.add_argument("--set", type=_kv, action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1, reproducible)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")


def _crf_flags(p):
    p.add_argument("--crf", choices=("on", "off"), help="CRF refinement (overrides the config)")
    p.add_argument("--crf-off", action="store_true", help="same as --crf off")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fuzzyseg",
        description="Fuzzy FCN segmentation of layered ultrasound images with dense CRF refinement.",
        epilog="configuration keys and defaults:\n" + help_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic phantom dataset")
    p.add_argument("out", type=Path, help="output directory")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tumors", type=int, choices=(0, 1, 2), help="fixed tumor count for every phantom")
    p.add_argument("--spec", type=_kv, action="append", default=[], metavar="KEY=VALUE",
                   help="override a phantom parameter, e.g. speckle=0.3")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("train", help="train a network on one cross-validation fold")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--fold", type=int)
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.add_argument("--epochs", type=int)
    p.add_argument("--all", action="store_true", help="train on every record (no held-out fold)")
    p.add_argument("--force", action="store_true")
    _common(p)

    p = sub.add_parser("infer", help="segment images with a trained checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", type=Path, help="images (and optional labels) to segment")
    src.add_argument("--images", type=Path, nargs="+", help="image files to segment")
    p.add_argument("--membership", choices=("sigmoid", "gaussian", "none"))
    p.add_argument("--jobs", type=int, default=1, help="images processed concurrently")
    p.add_argument("--dump-uncertainty", action="store_true",
                   help="also write the input fuzzy block's overall uncertainty maps")
    p.add_argument("--force", action="store_true")
    _crf_flags(p)
    _common(p)

    p = sub.add_parser("eval", help="score predicted label maps against a manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--pred", type=Path, required=True, help="directory of <case_id>.png label maps")
    p.add_argument("--out", type=Path, help="report CSV (default: <pred>/report.csv)")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("pipeline", help="phantoms, fold split, training, CRF and evaluation in one run")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--preset", choices=("scaled", "none"), default="scaled",
                   help="'scaled' applies the 64x64 depth-2 width-8 experiment settings before the config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--force", action="store_true")
    _crf_flags(p)
    _common(p)
    return parser


def _resolve_config(args, preset=None):
    cfg = RunConfig().update(preset or {})
    if args.config:
        cfg = load_config(args.config, cfg)
    cfg.update(dict(args.set))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg.epochs = args.epochs
    if getattr(args, "fold", None) is not None:
        cfg.fold = args.fold
    if getattr(args, "variant", None):
        cfg.membership = VARIANTS[args.variant] or "none"
    if getattr(args, "membership", None):
        cfg.membership = args.membership
    if getattr(args, "crf_off", False):
        cfg.crf = False
    elif getattr(args, "crf", None):
        cfg.crf = args.crf == "on"
    return cfg.validate()


def _prepare_out(path, force):
    if dataset.is_nonempty_dir(path) and not force:
        raise CommandError(f"output directory {path} is not empty; pass --force to overwrite")
    Path(path).mkdir(parents=True, exist_ok=True)


def cmd_phantom(args):
    _prepare_out(args.out, args.force)
    for sub in ("images", "labels", "specs"):
        if (args.out / sub).exists():
            shutil.rmtree(args.out / sub)
    spec = PhantomSpec(size=args.size)
    if args.spec:
        spec = PhantomSpec.from_text(spec.to_text() + "".join(f"{k} = {v}\n" for k, v in args.spec))
    spec.validate()
    weights = (1 / 3, 1 / 3, 1 / 3) if args.tumors is None else tuple(float(i == args.tumors) for i in range(3))
    records = dataset.write_phantom_dataset(args.out, args.count, args.seed, spec, weights)
    print(f"wrote {len(records)} phantoms to {args.out}")
    return 0


def cmd_train(args):
    cfg = _resolve_config(args)
    _prepare_out(args.out, args.force)
    records = dataset.read_manifest(args.manifest, require_labels=True)
    if args.all:
        train_idx = np.arange(len(records))
    else:
        train_idx, _ = dataset.fold_indices(len(records), cfg.fold, cfg.folds, cfg.seed)
    X, Y, _ = pipeline.load_records([records[i] for i in train_idx], cfg)
    log = pipeline.ArtifactLog(args.out)

    def report(epoch, batch, loss):
        if batch == 0:
            logger.info("epoch %d loss %.5f", epoch, loss)

    _, trace = pipeline.train_network(cfg, X, Y, args.out, log, callback=report)
    log.write()
    final = f"{trace[-1][2]:.5f}" if trace else "n/a (no epochs)"
    print(f"trained on {len(X)} images; final batch loss {final}; checkpoint {args.out / 'checkpoint.fseg'}")
    return 0


def _infer_config(args):
    if args.config is None:
        snapshot = args.checkpoint.parent / "config.txt"
        if snapshot.is_file():
            args.config = snapshot
    return _resolve_config(args)


def cmd_infer(args):
    cfg = _infer_config(args)
    _prepare_out(args.out, args.force)
    if args.manifest:
        records = dataset.read_manifest(args.manifest)
    else:
        records = [dataset.Record(p, None, p.stem) for p in args.images]
    net = pipeline.load_network(args.checkpoint, cfg)
    crf = pipeline.make_crf(cfg, cfg.crf_context) if cfg.crf else None
    X, _, originals = pipeline.load_records(records, cfg, with_labels=False)
    for sub in ("labels", "overlays") + (("uncertainty",) if args.dump_uncertainty else ()):
        (args.out / sub).mkdir(exist_ok=True)
    log = pipeline.ArtifactLog(args.out)

    def one(i):
        prob = predict_proba(net, X[i:i + 1])[0]
        labels = crf.refine(prob, X[i, :1]).labels if crf is not None else prob.argmax(axis=0)
        img = originals[i][0]
        full = pipeline.to_original_size(labels, img.shape)
        case = records[i].case_id
        dataset.save_label_png(log.add(args.out / "labels" / f"{case}.png"), full)
        dataset.save_rgb(log.add(args.out / "overlays" / f"{case}.png"), dataset.overlay(img, full))
        if args.dump_uncertainty and net.fuzzy:
            from .tensor import Tensor, no_grad

            with no_grad():
                u = net.fuzzy_in.maps(Tensor(X[i:i + 1].astype(net.dtype)))["overall"].data[0]
            for ch, plane in enumerate(u):
                dataset.save_heatmap(log.add(args.out / "uncertainty" / f"{case}_ch{ch}.png"), plane)
        return full

    if args.jobs > 1:
        with ThreadPoolExecutor(args.jobs) as pool:
            preds = list(pool.map(one, range(len(records))))
    else:
        preds = [one(i) for i in range(len(records))]

    rows = []
    for r, pred in zip(records, preds):
        if r.label is not None:
            truth = dataset.load_label_png(r.label)
            rows += pipeline.metric_rows(r.case_id, "crf" if crf else "fcn", pred, truth)
    if rows:
        pipeline.write_metric_rows(log.add(args.out / "metrics.csv"), rows)
    (args.out / "config.txt").write_text(cfg.to_text())
    log.add(args.out / "config.txt")
    log.write()
    print(f"segmented {len(records)} images into {args.out}")
    return 0


def cmd_eval(args):
    records = dataset.read_manifest(args.manifest, require_labels=True)
    missing = [r.case_id for r in records if not (args.pred / f"{r.case_id}.png").is_file()]
    if missing:
        raise CommandError(f"missing predictions for case ids: {', '.join(missing)}")
    preds, truths = [], []
    for r in records:
        truth = dataset.load_label_png(r.label)
        pred = dataset.load_label_png(args.pred / f"{r.case_id}.png")
        if pred.shape != truth.shape:
            raise CommandError(f"case {r.case_id}: prediction {pred.shape} and label {truth.shape} differ in size")
        preds.append(pred)
        truths.append(truth)
    s = pipeline.summarize("eval", preds, truths)
    out = args.out or args.pred / "report.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("metric", "value"))
        for name in CLASS_NAMES:
            w.writerow((f"IoU_{name}", repr(s[f"IoU_{name}"])))
        w.writerow(("mIoU", repr(s["mIoU"])))
        w.writerow(("TPR_tumor", "" if s["TPR_tumor"] is None else repr(s["TPR_tumor"])))
        w.writerow(("FPR_tumor", "" if s["FPR_tumor"] is None else repr(s["FPR_tumor"])))
    print(f"{'class':<12}{'IoU':>8}")
    for name in CLASS_NAMES:
        print(f"{name:<12}{s[f'IoU_{name}']:>8.4f}")
    print(f"{'mIoU':<12}{s['mIoU']:>8.4f}")
    for key in ("TPR_tumor", "FPR_tumor"):
        print(f"{key:<12}{'n/a' if s[key] is None else format(s[key], '.4f'):>8}")
    return 0


def cmd_pipeline(args):
    cfg = _resolve_config(args, SCALED_PRESET if args.preset == "scaled" else None)
    _prepare_out(args.out, args.force)
    summaries = pipeline.run_experiment(cfg, args.out, progress=lambda m: logger.info("%s", m))
    print(f"{'method':<16}{'tumor IoU':>10}{'mIoU':>8}")
    for s in summaries:
        print(f"{s['method']:<16}{s['IoU_tumor']:>10.4f}{s['mIoU']:>8.4f}")
    return 0


COMMANDS = {
    "phantom": cmd_phantom,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
}
EXPECTED = (
    CommandError,
    ConfigError,
    CheckpointError,
    ContextConstraintError,
    PhantomError,
    TrainingDivergedError,
    dataset.DatasetError,
    FileNotFoundError,
    ValueError,
)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        with threadpool_limits(getattr(args, "threads", 1)):
            return COMMANDS[args.command](args)
    except EXPECTED as exc:
        print(f"fuzzyseg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
