"""Dataset files: manifests, palette label maps, images, folds and overlays."""

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ._validation import N_CLASSES, check_gray_image, check_label_map
from .phantom import generate_phantom, sample_specs

# background, tumor, fat, mammary, muscle
PALETTE = np.array(
    [(0, 0, 0), (255, 0, 0), (0, 255, 0), (255, 255, 0), (0, 0, 255)],
    dtype=np.uint8,
)
MANIFEST_FIELDS = ("image", "label", "case_id")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    image: Path
    label: Path | None
    case_id: str


def save_label_png(path, labels):
    """Write a label map as an indexed PNG with the fixed class palette."""
    labels = check_label_map(labels)
    im = Image.fromarray(labels.astype(np.uint8), mode="P")
    im.putpalette(PALETTE.ravel().tolist())
    im.save(path, format="PNG")


def load_label_png(path):
    """Read a label map from an indexed PNG or an RGB image in the palette colours."""
    with Image.open(path) as im:
        if im.mode == "P":
            arr = np.asarray(im)
            if arr.size and arr.max() >= N_CLASSES:
                raise DatasetError(f"{path}: palette index {arr.max()} is not a class")
            return arr.astype(np.uint8)
        if im.mode in ("L", "I"):
            return check_label_map(np.asarray(im), name=str(path)).astype(np.uint8)
        rgb = np.asarray(im.convert("RGB"))
    match = (rgb[:, :, None, :] == PALETTE[None, None]).all(axis=-1)
    if not match.any(axis=-1).all():
        bad = rgb[~match.any(axis=-1)][0]
        raise DatasetError(f"{path}: colour {tuple(int(x) for x in bad)} is not in the label palette")
    return match.argmax(axis=-1).astype(np.uint8)


def load_gray(path):
    """Read an image (PNG, PGM, ...) as 8-bit grayscale."""
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "RGB", "RGBA", "I;16", "I"):
            raise DatasetError(f"{path}: unsupported image mode {im.mode}")
        if im.mode in ("I;16", "I"):
            arr = np.asarray(im, dtype=np.float64)
            arr = np.rint(arr * 255.0 / max(arr.max(), 1.0))
            return arr.astype(np.uint8)
        return np.asarray(im.convert("L"))


def save_gray(path, img):
    Image.fromarray(check_gray_image(img)).save(path)


def colorize(labels):
    return PALETTE[check_label_map(labels)]


def overlay(img, labels, alpha=0.5):
    """Blend a grayscale image with the label colours (RGB uint8)."""
    img = check_gray_image(img).astype(np.float64)
    labels = check_label_map(labels, img.shape)
    rgb = np.repeat(img[:, :, None], 3, axis=2)
    out = (1.0 - alpha) * rgb + alpha * PALETTE[labels]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def save_rgb(path, rgb):
    Image.fromarray(np.asarray(rgb, np.uint8), mode="RGB").save(path)


def save_heatmap(path, values):
    """Write a map with values in [0, 1] as an 8-bit grayscale PNG."""
    v = np.clip(np.asarray(values, np.float64), 0.0, 1.0)
    Image.fromarray(np.rint(v * 255).astype(np.uint8)).save(path)


def write_manifest(path, records):
    path = Path(path)
    root = path.parent
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for r in records:
            label = "" if r.label is None else _relative(r.label, root)
            writer.writerow([_relative(r.image, root), label, r.case_id])


def _relative(p, root):
    p = Path(p)
    try:
        return p.resolve().relative_to(root.resolve()).as_posix()
    except ValueError:
        return str(p)


def read_manifest(path, check_paths=True, require_labels=False):
    """Records of a manifest CSV; relative paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"manifest {path} does not exist")
    root = path.parent
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise DatasetError(f"{path}: header must be {','.join(MANIFEST_FIELDS)}, got {reader.fieldnames}")
        seen = set()
        for line, row in enumerate(reader, start=2):
            case = row["case_id"]
            if not case:
                raise DatasetError(f"{path}:{line}: empty case_id")
            if case in seen:
                raise DatasetError(f"{path}:{line}: duplicate case_id {case!r}")
            seen.add(case)
            image = root / row["image"]
            label = root / row["label"] if row["label"] else None
            if require_labels and label is None:
                raise DatasetError(f"{path}:{line}: case {case!r} has no label")
            if check_paths:
                for p in (image, label):
                    if p is not None and not p.is_file():
                        raise DatasetError(f"{path}:{line}: file {p} for case {case!r} does not exist")
            records.append(Record(image, label, case))
    return records


def kfold_split(n_records, k=10, seed=0):
    """Shuffled partition of ``range(n_records)`` into ``k`` near-equal folds.

    ``n_records`` may also be a sequence, whose length is used.
    """
    n = n_records if isinstance(n_records, (int, np.integer)) else len(n_records)
    if k < 2:
        raise DatasetError(f"need at least 2 folds, got {k}")
    if n < k:
        raise DatasetError(f"cannot split {n} records into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


def fold_indices(n_records, fold, k=10, seed=0):
    """``(train, test)`` index arrays for one fold."""
    folds = kfold_split(n_records, k, seed)
    if not 0 <= fold < k:
        raise DatasetError(f"fold must be in 0..{k - 1}, got {fold}")
    train = np.sort(np.concatenate([f for i, f in enumerate(folds) if i != fold]))
    return train, folds[fold]


def write_phantom_dataset(out_dir, count, seed, base_spec=None, tumor_weights=(1 / 3, 1 / 3, 1 / 3)):
    """Generate ``count`` phantoms with image/label PNGs, spec sidecars and a manifest."""
    out = Path(out_dir)
    for sub in ("images", "labels", "specs"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    records = []
    width = max(3, len(str(max(count - 1, 0))))
    for i, spec in enumerate(sample_specs(count, seed, base_spec, tumor_weights)):
        case = f"phantom_{i:0{width}d}"
        img, lab = generate_phantom(spec)
        image_path = out / "images" / f"{case}.png"
        label_path = out / "labels" / f"{case}.png"
        save_gray(image_path, img)
        save_label_png(label_path, lab)
        (out / "specs" / f"{case}.txt").write_text(spec.to_text())
        records.append(Record(image_path, label_path, case))
    write_manifest(out / "manifest.csv", records)
    return records


def is_nonempty_dir(path):
    return os.path.isdir(path) and any(os.scandir(path))
