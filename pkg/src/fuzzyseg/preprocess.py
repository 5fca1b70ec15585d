"""Contrast enhancement and wavelet channel augmentation."""

import numpy as np
from PIL import Image
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_gray_image

LEVELS = 256
_SQRT2 = np.sqrt(2.0)


def histogram_equalize(img):
    """Histogram equalization onto the full 0..255 range.

    ``h(t) = floor((cdf(t) - cdf_min) / (1 - cdf_min) * 255)`` where
    ``cdf_min`` is the smallest non-zero cumulative frequency. Evaluated
    with integer counts so the floor is exact. A single-intensity image
    maps to 255 everywhere.
    """
    img = check_gray_image(img)
    counts = np.bincount(img.ravel(), minlength=LEVELS)
    cum = np.cumsum(counts)
    n = int(cum[-1])
    cmin = int(cum[counts.nonzero()[0][0]])
    if cmin == n:
        return np.full_like(img, 255)
    lut = ((cum - cmin) * 255) // (n - cmin)
    lut = np.clip(lut, 0, 255).astype(np.uint8)
    return lut[img]


def haar_level1(img):
    """One-level orthonormal 2-D Haar transform.

    Returns ``(ll, lh, hl, hh)``, each half the input extent. The first
    letter is the filter applied along rows of pixels (horizontal pairs),
    the second along columns.
    """
    x = np.asarray(img, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"haar_level1 expects a 2-D image, got shape {x.shape}")
    h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"haar_level1 needs even extents, got {h}x{w}; resize the image first")
    lo = (x[:, 0::2] + x[:, 1::2]) / _SQRT2
    hi = (x[:, 0::2] - x[:, 1::2]) / _SQRT2
    ll = (lo[0::2] + lo[1::2]) / _SQRT2
    lh = (lo[0::2] - lo[1::2]) / _SQRT2
    hl = (hi[0::2] + hi[1::2]) / _SQRT2
    hh = (hi[0::2] - hi[1::2]) / _SQRT2
    return ll, lh, hl, hh


def haar_inverse(ll, lh, hl, hh):
    """Inverse of :func:`haar_level1`."""
    ll, lh, hl, hh = (np.asarray(a, dtype=np.float64) for a in (ll, lh, hl, hh))
    h2, w2 = ll.shape
    lo = np.empty((2 * h2, w2))
    hi = np.empty((2 * h2, w2))
    lo[0::2] = (ll + lh) / _SQRT2
    lo[1::2] = (ll - lh) / _SQRT2
    hi[0::2] = (hl + hh) / _SQRT2
    hi[1::2] = (hl - hh) / _SQRT2
    x = np.empty((2 * h2, 2 * w2))
    x[:, 0::2] = (lo + hi) / _SQRT2
    x[:, 1::2] = (lo - hi) / _SQRT2
    return x


def _minmax(plane):
    lo, hi = plane.min(), plane.max()
    if hi - lo <= 0:
        return np.zeros_like(plane)
    return (plane - lo) / (hi - lo)


def _upsample_nearest(plane):
    return np.repeat(np.repeat(plane, 2, axis=0), 2, axis=1)


def assemble_channels(img, wavelet=True):
    """Stack the network input channels of an equalized image.

    Channel 1 is ``img / 255``; with ``wavelet`` channel 2 is the min-max
    normalized low-pass band and channel 3 the min-max normalized detail
    magnitude ``sqrt(lh^2 + hl^2 + hh^2)``, both upsampled back to the
    input size. Returns ``[D, H, W]`` float64 in [0, 1].
    """
    img = check_gray_image(img)
    gray = img.astype(np.float64) / 255.0
    if not wavelet:
        return gray[None]
    ll, lh, hl, hh = haar_level1(gray)
    detail = np.sqrt(lh * lh + hl * hl + hh * hh)
    return np.stack([gray, _minmax(_upsample_nearest(ll)), _minmax(_upsample_nearest(detail))])


def resize_gray(img, size):
    """Bilinear resize of a uint8 image to ``size = (height, width)``."""
    img = check_gray_image(img)
    size = tuple(int(s) for s in size)
    if img.shape == size:
        return img
    return np.asarray(Image.fromarray(img).resize((size[1], size[0]), Image.BILINEAR))


def resize_labels(labels, size):
    """Nearest-neighbour resize of an integer label map."""
    labels = np.asarray(labels)
    size = tuple(int(s) for s in size)
    if labels.shape == size:
        return labels
    rows = (np.arange(size[0]) * labels.shape[0] // size[0]).clip(0, labels.shape[0] - 1)
    cols = (np.arange(size[1]) * labels.shape[1] // size[1]).clip(0, labels.shape[1] - 1)
    return labels[np.ix_(rows, cols)]


def preprocess_image(img, size=None, wavelet=True, equalize=True):
    img = check_gray_image(img)
    if size is not None:
        img = resize_gray(img, size)
    if equalize:
        img = histogram_equalize(img)
    return assemble_channels(img, wavelet=wavelet)


class BUSPreprocessor(TransformerMixin, BaseEstimator):
    """Resize, equalize and wavelet-augment grayscale images.

    Parameters
    ----------
    image_size : int or (int, int), default=256
        Target ``(height, width)``; both must be even.
    wavelet : bool, default=True
        Produce the 3-channel (gray, low-pass, detail) input; otherwise a
        single gray channel.
    equalize : bool, default=True
        Apply histogram equalization after resizing.
    """

    def __init__(self, image_size=256, wavelet=True, equalize=True):
        self.image_size = image_size
        self.wavelet = wavelet
        self.equalize = equalize

    def _size(self):
        size = self.image_size
        size = (size, size) if np.isscalar(size) else tuple(size)
        if len(size) != 2 or any(s < 2 or s % 2 for s in size):
            raise ValueError(f"image_size must be even and at least 2, got {self.image_size!r}")
        return size

    def fit(self, X, y=None):
        self._size()
        self.n_channels_ = 3 if self.wavelet else 1
        return self

    def transform(self, X):
        """Map a sequence of 2-D uint8 images to an ``[N, D, H, W]`` array."""
        size = self._size()
        return np.stack([preprocess_image(img, size, self.wavelet, self.equalize) for img in X])
