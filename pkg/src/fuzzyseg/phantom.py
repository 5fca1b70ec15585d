"""Synthetic layered breast-ultrasound phantoms with exact labels.

Rows from top to bottom: background, fat, mammary, muscle, background.
Tumors are dark ellipses placed inside the mammary band.
"""

from dataclasses import asdict, dataclass, fields, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .metrics import count_components

BACKGROUND, TUMOR, FAT, MAMMARY, MUSCLE = range(5)
BAND_LABELS = (BACKGROUND, FAT, MAMMARY, MUSCLE, BACKGROUND)


class PhantomError(ValueError):
    pass


@dataclass
class PhantomSpec:
    """Parameters of one phantom.

    ``band_means`` and ``band_fractions`` list the five row bands top to
    bottom. ``tumor_radii`` gives the (min, max) vertical semi-axis as a
    fraction of ``size`` and ``tumor_aspect`` the (min, max) width/height ratio.
    ``speckle`` is the standard deviation of the unit-mean multiplicative
    noise and ``jitter`` the boundary amplitude as a fraction of the size.
    ``striation`` adds stripes of that amplitude to the muscle band,
    running parallel to its upper boundary.
    """

    size: int = 64
    band_means: tuple = (150.0, 80.0, 170.0, 115.0, 30.0)
    band_fractions: tuple = (0.12, 0.2, 0.33, 0.2, 0.15)
    tumor_count: int = 1
    tumor_mean: float = 45.0
    tumor_radii: tuple = (0.055, 0.094)
    tumor_aspect: tuple = (1.2, 2.0)
    speckle: float = 0.25
    texture: float = 10.0
    striation: float = 0.0
    striation_period: float = 4.0
    jitter: float = 0.03
    seed: int = 0

    def validate(self):
        if self.size < 8:
            raise PhantomError(f"size must be at least 8, got {self.size}")
        if len(self.band_means) != 5 or len(self.band_fractions) != 5:
            raise PhantomError("band_means and band_fractions need five entries each")
        if min(self.band_fractions) <= 0 or abs(sum(self.band_fractions) - 1.0) > 1e-9:
            raise PhantomError(f"band fractions must be positive and sum to 1, got {self.band_fractions}")
        if self.tumor_count not in (0, 1, 2):
            raise PhantomError(f"tumor_count must be 0, 1 or 2, got {self.tumor_count}")
        if min(self.speckle, self.jitter, self.texture, self.striation) < 0:
            raise PhantomError("speckle, texture, striation and jitter must be non-negative")
        if self.striation_period <= 0:
            raise PhantomError("striation_period must be positive")
        lo, hi = self.tumor_radii
        if not 0 < lo <= hi:
            raise PhantomError(f"invalid tumor_radii {self.tumor_radii}")
        return self

    def to_text(self):
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text):
        types = {f.name: f.default for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            key, _, raw = (s.strip() for s in line.partition("="))
            if key not in types:
                raise PhantomError(f"unknown phantom key {key!r}")
            values[key] = _parse_like(types[key], raw)
        return cls(**values)


def _fmt(v):
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    return repr(v)


def _parse_like(default, raw):
    if isinstance(default, tuple):
        return tuple(float(x) for x in raw.split(","))
    return type(default)(float(raw)) if isinstance(default, float) else int(raw)


def band_boundaries(spec, rng):
    """Row coordinate of the four band boundaries for every column, shape (4, W)."""
    n = spec.size
    x = np.arange(n)
    edges = np.cumsum(spec.band_fractions)[:-1] * n
    out = np.empty((4, n))
    for k, e in enumerate(edges):
        phase = rng.uniform(0, 2 * np.pi)
        freq = rng.uniform(0.5, 1.5)
        amp = spec.jitter * n * rng.uniform(0.5, 1.0)
        out[k] = e + amp * np.sin(2 * np.pi * freq * x / n + phase)
    # keep bands at least one row thick
    for k in range(1, 4):
        out[k] = np.maximum(out[k], out[k - 1] + 1.0)
    return out


def band_labels(bounds, n):
    """Band index (0..4) of every pixel given boundary rows."""
    rows = np.arange(n)[:, None] + 0.5
    return (rows[None] > bounds[:, None, :]).sum(axis=0)


def _place_tumors(spec, bounds, rng, attempts=200):
    n = spec.size
    rows, cols = np.mgrid[0:n, 0:n] + 0.5
    top, bottom = bounds[1], bounds[2]
    mask = np.zeros((n, n), bool)
    placed = []
    for _ in range(spec.tumor_count):
        for _ in range(attempts):
            ry = rng.uniform(*spec.tumor_radii) * n
            rx = ry * rng.uniform(*spec.tumor_aspect)
            if 2 * rx + 2 >= n:
                continue
            cx = rng.uniform(rx + 1, n - rx - 1)
            span = slice(max(int(cx - rx), 0), min(int(np.ceil(cx + rx)) + 1, n))
            lo = top[span].max() + ry + 1
            hi = bottom[span].min() - ry - 1
            if hi < lo:
                continue
            cy = rng.uniform(lo, hi)
            blob = ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0
            # two-pixel gap keeps separate tumors separate components
            grown = ((rows - cy) / (ry + 2)) ** 2 + ((cols - cx) / (rx + 2)) ** 2 <= 1.0
            if (grown & mask).any() or not blob.any():
                continue
            mask |= blob
            placed.append((cy, cx, ry, rx))
            break
        else:
            raise PhantomError(
                f"could not fit {spec.tumor_count} tumor(s) with radii {spec.tumor_radii} "
                "inside the mammary band"
            )
    return mask, placed


def generate_phantom(spec):
    """Render ``(image uint8 [H, W], labels uint8 [H, W])`` for ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.size
    bounds = band_boundaries(spec, rng)
    band = band_labels(bounds, n)
    labels = np.asarray(BAND_LABELS, np.uint8)[band]
    img = np.asarray(spec.band_means, float)[band]
    tumors, _ = _place_tumors(spec, bounds, rng)
    labels[tumors] = TUMOR
    img[tumors] = spec.tumor_mean
    if spec.striation > 0:
        depth = np.arange(n)[:, None] - bounds[2][None, :]
        phase = rng.uniform(0, 2 * np.pi)
        stripes = spec.striation * np.sin(2 * np.pi * depth / spec.striation_period + phase)
        muscle = (labels == MUSCLE)
        img[muscle] += stripes[muscle]
    if spec.texture > 0:
        img = img + spec.texture * gaussian_filter(rng.standard_normal((n, n)), 1.5) * 3.0
    if spec.speckle > 0:
        shape = 1.0 / spec.speckle**2
        img = img * rng.gamma(shape, 1.0 / shape, (n, n))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), labels


def sample_specs(count, seed, base=None, tumor_weights=(1 / 3, 1 / 3, 1 / 3)):
    """``count`` phantom specs with independent seeds and random tumor counts."""
    base = PhantomSpec() if base is None else base
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(count)
    rng = np.random.default_rng(ss.spawn(1)[0])
    counts = rng.choice(3, size=count, p=np.asarray(tumor_weights) / np.sum(tumor_weights))
    return [
        replace(base, tumor_count=int(c), seed=int(child.generate_state(1)[0]))
        for c, child in zip(counts, children)
    ]


def tumor_components(labels):
    return count_components(np.asarray(labels) == TUMOR)

