"""Input validation helpers shared by the estimators and the CLI."""

import numpy as np

N_CLASSES = 5


def check_gray_image(img, name="image"):
    """Return ``img`` as a 2-D uint8 array, rejecting out-of-range values."""
    arr = np.asarray(img)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr
    if np.issubdtype(arr.dtype, np.floating):
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise ValueError(f"{name} must hold integer intensities 0..255")
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError(f"{name} intensities must lie in [0, 255], got [{arr.min()}, {arr.max()}]")
    return arr.astype(np.uint8)


def check_label_map(labels, shape=None, name="label map"):
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if np.any(arr != np.round(arr)):
            raise ValueError(f"{name} must hold integer class indices")
    if arr.size and (arr.min() < 0 or arr.max() >= N_CLASSES):
        raise ValueError(f"{name} values must lie in 0..{N_CLASSES - 1}")
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")
    return arr.astype(np.int64)


def check_channel_batch(X, n_channels=None, name="X"):
    """Return ``X`` as a float ``[N, D, H, W]`` array (a single ``[D, H, W]`` is promoted)."""
    arr = np.asarray(X)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"{name} must have shape [N, D, H, W], got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if n_channels is not None and arr.shape[1] != n_channels:
        raise ValueError(f"{name} has {arr.shape[1]} channels, expected {n_channels}")
    return arr


def check_unary(prob, name="unary"):
    """Return per-pixel class probabilities as float64 ``[R, H, W]``."""
    arr = np.asarray(prob, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"{name} must have shape [R, H, W], got {arr.shape}")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must hold finite non-negative probabilities")
    if not np.allclose(arr.sum(axis=0), 1.0, atol=1e-6):
        raise ValueError(f"{name} probabilities must sum to one per pixel")
    return arr
