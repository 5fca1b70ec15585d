"""Fast approximate Gaussian filtering in feature space.

Computes ``out_i = sum_j exp(-|f_i - f_j|^2 / 2) v_j`` for all ``i`` with a
regular grid in feature space: values are splatted onto grid nodes with
cubic convolution weights, the grid is blurred with a separable sampled
Gaussian, and results are interpolated back with the same weights. Point
groups separated by more than the kernel support get their own grids, so
distant clusters do not inflate the grid.
"""

import itertools

import numpy as np
from scipy import sparse
from scipy.ndimage import convolve1d

MAX_DIM = 8
SPACING = 0.5
TRUNCATE = 4.0
MAX_CELLS = 20_000_000
MAX_TAPS = 40_000_000


def _keys_weights(t):
    # cubic convolution (a = -0.5) weights of nodes -1, 0, 1, 2 for offset t in [0, 1)
    a = -0.5

    def k(x):
        x = np.abs(x)
        inner = (a + 2) * x**3 - (a + 3) * x**2 + 1
        outer = a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a
        return np.where(x <= 1, inner, np.where(x < 2, outer, 0.0))

    return np.stack([k(t + 1), k(t), k(1 - t), k(2 - t)], axis=-1)


def _split_groups(g, max_gap):
    """Partition point indices into groups separated by more than ``max_gap`` on some axis."""
    pending = [np.arange(len(g))]
    done = []
    while pending:
        idx = pending.pop()
        for k in range(g.shape[1]):
            order = idx[np.argsort(g[idx, k], kind="stable")]
            cuts = np.nonzero(np.diff(g[order, k]) > max_gap)[0] + 1
            if len(cuts):
                pending.extend(np.split(order, cuts))
                break
        else:
            done.append(np.sort(idx))
    return sorted(done, key=lambda a: a[0])


class _Grid:
    # splat/slice operators for one group of points
    def __init__(self, g, max_cells):
        n, d = g.shape
        g = g - g.min(axis=0)
        base = np.floor(g).astype(np.int64)
        w1 = _keys_weights(g - base)
        # column c of the weights belongs to node base - 1 + c, stored at base + c
        self.shape = tuple(int(base[:, k].max()) + 4 for k in range(d))
        cells = int(np.prod(self.shape, dtype=np.float64))
        if cells > max_cells:
            raise ValueError(
                f"filter grid would need {cells} cells (limit {max_cells}); "
                "increase the bandwidths or the grid spacing"
            )
        strides = np.cumprod((1,) + self.shape[::-1][:-1])[::-1]
        cols, vals = [], []
        for combo in itertools.product(range(4), repeat=d):
            idx = np.zeros(n, np.int64)
            w = np.ones(n)
            for k, c in enumerate(combo):
                idx += (base[:, k] + c) * strides[k]
                w *= w1[:, k, c]
            cols.append(idx)
            vals.append(w)
        rows = np.tile(np.arange(n), 4**d)
        self.slice = sparse.csr_matrix((np.concatenate(vals), (rows, np.concatenate(cols))), shape=(n, cells))
        self.slice.sum_duplicates()
        self.splat = self.slice.T.tocsr()


class GaussianFilter:
    """Reusable filter for a fixed set of feature vectors.

    Parameters
    ----------
    features : array of shape (N, d)
        Feature vectors, already divided by their bandwidths.
    spacing : float
        Grid spacing in feature units.
    truncate : float
        Blur kernel support, in feature units.
    max_cells : int
        Refuse grids larger than this.
    """

    def __init__(self, features, spacing=SPACING, truncate=TRUNCATE, max_cells=MAX_CELLS):
        f = np.asarray(features, dtype=np.float64)
        if f.ndim != 2:
            raise ValueError(f"features must be [N, d], got shape {f.shape}")
        n, d = f.shape
        if not 1 <= d <= MAX_DIM:
            raise ValueError(f"feature dimension must be between 1 and {MAX_DIM}, got {d}")
        if not np.all(np.isfinite(f)):
            raise ValueError("features must be finite")
        if n * 4**d > MAX_TAPS:
            raise ValueError(f"{n} points in {d} dimensions exceed the interpolation budget of {MAX_TAPS} taps")
        self.n, self.d = n, d
        self.radius = int(np.ceil(truncate / spacing))
        self.kernel = np.exp(-0.5 * (np.arange(-self.radius, self.radius + 1) * spacing) ** 2)
        g = f / spacing
        # points this far apart on one axis share no blurred grid support
        max_gap = self.radius + 4
        self.groups = [(idx, _Grid(g[idx], max_cells)) for idx in (_split_groups(g, max_gap) if n else [])]

    @property
    def cells(self):
        return sum(int(np.prod(grid.shape)) for _, grid in self.groups)

    def __call__(self, values):
        v = np.asarray(values, dtype=np.float64)
        squeeze = v.ndim == 1
        v = v.reshape(self.n, -1)
        out = np.zeros_like(v)
        kernel = self.kernel.astype(np.float32)
        for idx, grid in self.groups:
            # the blur runs in single precision; splat and slice stay in double
            blurred = (grid.splat @ v[idx]).astype(np.float32).reshape(grid.shape + (v.shape[1],))
            for k in range(self.d):
                blurred = convolve1d(blurred, kernel, axis=k, mode="constant")
            out[idx] = grid.slice @ blurred.reshape(-1, v.shape[1]).astype(np.float64)
        return out[:, 0] if squeeze else out


def gaussian_filter_highdim(values, features, spacing=SPACING, truncate=TRUNCATE):
    """Approximate ``sum_j exp(-|f_i - f_j|^2 / 2) v_j`` for every point ``i``.

    ``values`` is ``(N,)`` or ``(N, V)``; ``features`` is ``(N, d)`` with
    ``d <= 8``, pre-scaled by the kernel bandwidths.
    """
    return GaussianFilter(features, spacing, truncate)(values)


def exact_gaussian_filter(values, features, block=1024):
    """Direct O(N^2) evaluation of the same sum (reference implementation)."""
    f = np.asarray(features, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    out = np.empty(v.shape)
    sq = (f * f).sum(axis=1)
    for start in range(0, len(f), block):
        fb = f[start:start + block]
        d2 = sq[start:start + block, None] + sq[None] - 2.0 * fb @ f.T
        out[start:start + block] = np.exp(-0.5 * np.maximum(d2, 0.0)) @ v
    return out
