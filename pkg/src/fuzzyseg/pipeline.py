"""End-to-end building blocks shared by the command-line tools.

``run_experiment`` chains phantom generation, the fold split, training of
the fuzzy and plain networks, CRF refinement and evaluation, writing every
intermediate artifact under one run directory.
"""

import csv
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataset
from .checkpoint import load_checkpoint, save_checkpoint
from .densecrf import AnatomyCRF, ContextLabelSet
from .fcn import UNet, predict_proba, train
from .metrics import CLASS_NAMES, count_components, mean_iou, metrics, pooled_metrics
from .phantom import PhantomSpec
from .preprocess import preprocess_image, resize_labels

logger = logging.getLogger(__name__)

TUMOR = 1
METRIC_FIELDS = ("case_id", "method", "class", "TPR", "FPR", "IoU")


class ArtifactLog:
    """Collects produced files and writes them to ``artifacts.txt``."""

    def __init__(self, root):
        self.root = Path(root)
        self.paths = []

    def add(self, path):
        self.paths.append(Path(path))
        return path

    def write(self):
        lines = sorted({p.resolve().relative_to(self.root.resolve()).as_posix() for p in self.paths})
        path = self.root / "artifacts.txt"
        path.write_text("".join(f"{line}\n" for line in lines))
        return path


def load_records(records, cfg, with_labels=True):
    """Read and preprocess images (and labels) of manifest records.

    Returns ``(X [M, D, S, S], Y [M, S, S] or None, originals)`` where
    ``originals`` holds the raw images and labels at full size.
    """
    size = (cfg.image_size, cfg.image_size)
    X, Y, originals = [], [], []
    for r in records:
        img = dataset.load_gray(r.image)
        lab = None
        if with_labels and r.label is not None:
            lab = dataset.load_label_png(r.label)
            if lab.shape != img.shape:
                raise dataset.DatasetError(f"case {r.case_id}: label {lab.shape} and image {img.shape} differ")
        X.append(preprocess_image(img, size, cfg.wavelet, cfg.equalize))
        if lab is not None:
            Y.append(resize_labels(lab, size))
        originals.append((img, lab))
    X = np.stack(X) if X else np.zeros((0, 3 if cfg.wavelet else 1) + size)
    if with_labels and len(Y) != len(X):
        missing = [r.case_id for r in records if r.label is None]
        raise dataset.DatasetError(f"cases without labels: {', '.join(missing)}")
    return X, (np.stack(Y) if Y else None), originals


def write_loss_csv(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "batch", "loss"))
        for epoch, batch, loss in trace:
            w.writerow((epoch, batch, repr(float(loss))))


def train_network(cfg, X, Y, out_dir, log=None, callback=None):
    """Train one network and write checkpoint, loss trace and config snapshot."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    net_cfg = cfg.network_config()
    net = UNet(net_cfg)
    trace = train(net, X, Y, net_cfg, callback=callback)
    paths = [out / "checkpoint.fseg", out / "loss.csv", out / "config.txt"]
    save_checkpoint(paths[0], net.parameters())
    write_loss_csv(paths[1], trace)
    paths[2].write_text(cfg.to_text())
    if log is not None:
        for p in paths:
            log.add(p)
    return net, trace


def load_network(checkpoint, cfg):
    """Network described by ``cfg`` with weights from ``checkpoint``."""
    state = load_checkpoint(checkpoint)
    net = UNet(cfg.network_config())
    net.load_state_dict(state)
    return net


def make_crf(cfg, context=True):
    return AnatomyCRF.from_params(
        replace(cfg.crf_params(), w3=cfg.w3 if context else 0.0),
        use_context=context,
        context_vectors=ContextLabelSet(cfg.context_vectors()).vectors,
    ).fit()


def to_original_size(labels, shape):
    return resize_labels(labels, shape).astype(np.uint8)


def metric_rows(case_id, method, pred, truth):
    rows = []
    for c, name in enumerate(CLASS_NAMES):
        m = metrics(pred, truth, c)
        rows.append((case_id, method, name, _num(m.tpr), _num(m.fpr), _num(m.iou)))
    return rows


def _num(v):
    return "" if v is None else repr(float(v))


def write_metric_rows(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        w.writerows(rows)


def summarize(method, preds, truths):
    """Summary numbers of one method over a set of (pred, truth) pairs."""
    per_class, miou = mean_iou(preds, truths)
    tumor = pooled_metrics(preds, truths, TUMOR)
    out = {"method": method, "mIoU": miou}
    out.update({f"IoU_{name}": float(v) for name, v in zip(CLASS_NAMES, per_class)})
    out["TPR_tumor"] = tumor.tpr
    out["FPR_tumor"] = tumor.fpr
    checks = [
        count_components(p == TUMOR) == count_components(t == TUMOR)
        for p, t in zip(preds, truths)
        if count_components(t == TUMOR) in (0, 2)
    ]
    out["component_cases"] = len(checks)
    out["component_match"] = float(np.mean(checks)) if checks else None
    return out


SUMMARY_FIELDS = (
    "method",
    "mIoU",
    *(f"IoU_{n}" for n in CLASS_NAMES),
    "TPR_tumor",
    "FPR_tumor",
    "component_cases",
    "component_match",
)


def write_summary(path, summaries):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for s in summaries:
            w.writerow([_fmt(s[k]) for k in SUMMARY_FIELDS])


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def run_experiment(cfg, out_dir, variants=("fuzzy-sigmoid", "nonfuzzy"), progress=None):
    """Phantoms -> fold split -> training -> CRF -> metrics, all under ``out_dir``.

    Returns the list of summary dicts (one per method). CRF variants are
    applied to the output of the first network variant.
    """
    from .config import VARIANTS

    say = progress or (lambda msg: None)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = ArtifactLog(out)
    t0 = time.perf_counter()

    say(f"generating {cfg.phantom_count} phantoms")
    base_spec = PhantomSpec(size=cfg.phantom_size)
    records = dataset.write_phantom_dataset(out / "data", cfg.phantom_count, cfg.seed, base_spec)
    log.add(out / "data" / "manifest.csv")
    train_idx, test_idx = dataset.fold_indices(len(records), cfg.fold, cfg.folds, cfg.seed)
    with open(log.add(out / "split.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("case_id", "subset"))
        for i, r in enumerate(records):
            w.writerow((r.case_id, "test" if i in set(test_idx) else "train"))

    X, Y, _ = load_records(records, cfg)
    test_cases = [records[i].case_id for i in test_idx]
    truths = list(Y[test_idx])
    summaries, rows = [], []
    first_prob = None
    for variant in variants:
        vcfg = replace(cfg, membership=VARIANTS[variant] or "none")
        say(f"training {variant} on {len(train_idx)} images")
        net, _ = train_network(vcfg, X[train_idx], Y[train_idx], out / variant, log)
        prob = predict_proba(net, X[test_idx])
        preds = list(prob.argmax(axis=1))
        if first_prob is None:
            first_prob = prob
        rows += [r for case, p, t in zip(test_cases, preds, truths) for r in metric_rows(case, variant, p, t)]
        summaries.append(summarize(variant, preds, truths))
        say(f"{variant}: tumor IoU {summaries[-1]['IoU_tumor']:.4f}, mIoU {summaries[-1]['mIoU']:.4f}")

    for name, context in (("crf-plain", False), ("crf-anatomy", True)):
        crf = make_crf(cfg, context)
        # intensity and position only: the gray channel is the colour feature
        preds = list(crf.predict(first_prob, X[test_idx, :1]))
        rows += [r for case, p, t in zip(test_cases, preds, truths) for r in metric_rows(case, name, p, t)]
        summaries.append(summarize(name, preds, truths))
        say(f"{name}: tumor IoU {summaries[-1]['IoU_tumor']:.4f}, mIoU {summaries[-1]['mIoU']:.4f}")

    write_metric_rows(log.add(out / "metrics.csv"), rows)
    write_summary(log.add(out / "summary.csv"), summaries)
    (out / "config.txt").write_text(cfg.to_text())
    log.add(out / "config.txt")
    log.write()
    say(f"done in {time.perf_counter() - t0:.1f} s")
    return summaries
