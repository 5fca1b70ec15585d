"""Mean-field inference for a fully connected CRF with Potts compatibility.

The pairwise weight between pixels ``i`` and ``j`` is a sum of three
Gaussian kernels::

    w1 exp(-|p_i - p_j|^2 / 2 sa^2 - |I_i - I_j|^2 / 2 sb^2)   appearance
    w2 exp(-|p_i - p_j|^2 / 2 sg^2)                             smoothness
    w3 exp(-|p_i - p_j|^2 / 2 st^2 - |V_i - V_j|^2 / 2 sl^2)   context

with pixel positions ``p`` (in pixels), colour features ``I`` and context
vectors ``V``. Setting ``w3 = 0`` gives the plain two-kernel model.
"""

from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.ndimage import convolve1d

from ..fcn import UnaryField
from .filter import GaussianFilter

BRUTE_FORCE_MAX_PIXELS = 4096
UNARY_FLOOR = 1e-12


@dataclass
class CrfParams:
    # weights tuned on 64x64 phantoms: larger values swamp the unary term
    w1: float = 0.01
    w2: float = 0.05
    w3: float = 0.001
    sigma_alpha: float = 40.0
    sigma_beta: float = 0.1
    sigma_gamma: float = 3.0
    sigma_tau: float = 40.0
    sigma_lambda: float = 20.0
    iterations: int = 10

    def validate(self):
        for name in ("w1", "w2", "w3"):
            if getattr(self, name) < 0:
                raise ValueError(f"CRF weight {name} must be >= 0, got {getattr(self, name)}")
        for name in ("sigma_alpha", "sigma_beta", "sigma_gamma", "sigma_tau", "sigma_lambda"):
            if not getattr(self, name) > 0:
                raise ValueError(f"CRF bandwidth {name} must be > 0, got {getattr(self, name)}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    @property
    def weights(self):
        return np.array([self.w1, self.w2, self.w3], float)


@dataclass
class MeanFieldResult(UnaryField):
    """Refined marginals plus the max absolute marginal change of every iteration."""

    max_change: tuple = ()


def _as_prob(unary):
    prob = unary.prob if isinstance(unary, UnaryField) else unary
    prob = np.asarray(prob, dtype=np.float64)
    if prob.ndim != 3:
        raise ValueError(f"unary must have shape [R, H, W], got {prob.shape}")
    if np.any(prob < 0) or not np.all(np.isfinite(prob)):
        raise ValueError("unary probabilities must be finite and non-negative")
    return prob


def _check_features(image, context, shape, params):
    h, w = shape
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3 or image.shape[1:] != (h, w):
        raise ValueError(f"colour features must be [C, {h}, {w}], got {image.shape}")
    if context is None:
        if params.w3 > 0:
            raise ValueError("context features are required when w3 > 0")
    else:
        context = np.asarray(context, dtype=np.float64)
        if context.ndim != 3 or context.shape[1:] != (h, w):
            raise ValueError(f"context features must be [K, {h}, {w}], got {context.shape}")
    return image, context


def unary_energy(prob):
    return -np.log(np.maximum(prob, UNARY_FLOOR))


def _softmax(logits):
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def _positions(h, w):
    rows, cols = np.mgrid[0:h, 0:w]
    return np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)


def _spatial_blur(x, sigma, truncate=6.0):
    # sum_j exp(-|p_i - p_j|^2 / 2 sigma^2) x_j over the pixel grid, x of shape [..., H, W]
    for axis in (-2, -1):
        n = x.shape[axis]
        r = int(min(n - 1, np.ceil(truncate * sigma)))
        k = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
        x = convolve1d(x, k, axis=axis, mode="constant")
    return x


class _FastMessages:
    """Kernel-weighted label sums, self-contribution excluded."""

    def __init__(self, image, context, params, shape):
        h, w = shape
        self.params = params
        self.shape = shape
        self.appearance = None
        if params.w1 > 0:
            feats = np.concatenate(
                [_positions(h, w) / params.sigma_alpha, image.reshape(len(image), -1).T / params.sigma_beta],
                axis=1,
            )
            self.appearance = GaussianFilter(feats)
        self.context = None
        if params.w3 > 0:
            flat = context.reshape(len(context), -1).T
            uniq, inverse = np.unique(flat, axis=0, return_inverse=True)
            inverse = inverse.reshape(h, w)
            d2 = ((flat[:, None, :] - uniq[None]) ** 2).sum(axis=-1)
            coupling = np.exp(-0.5 * d2 / params.sigma_lambda**2).T.reshape(len(uniq), h, w)
            self.context = (inverse, coupling)

    def __call__(self, q):
        p = self.params
        r = q.shape[0]
        msg = np.zeros_like(q)
        if self.appearance is not None:
            flat = self.appearance(q.reshape(r, -1).T).T.reshape(q.shape)
            msg += p.w1 * (flat - q)
        if p.w2 > 0:
            msg += p.w2 * (_spatial_blur(q, p.sigma_gamma) - q)
        if self.context is not None:
            inverse, coupling = self.context
            acc = np.zeros_like(q)
            for s in range(len(coupling)):
                acc += coupling[s] * _spatial_blur(q * (inverse == s), p.sigma_tau)
            msg += p.w3 * (acc - q)
        return msg


def _pairwise_rows(image, context, params, rows, pos):
    # dense combined kernel rows for pixel indices ``rows``, diagonal zeroed
    def sqdist(a, b):
        return ((a[:, None, :] - b[None]) ** 2).sum(axis=-1)

    dp = sqdist(pos[rows], pos)
    k = np.zeros_like(dp)
    if params.w1 > 0:
        di = sqdist(image[rows], image)
        k += params.w1 * np.exp(-dp / (2 * params.sigma_alpha**2) - di / (2 * params.sigma_beta**2))
    if params.w2 > 0:
        k += params.w2 * np.exp(-dp / (2 * params.sigma_gamma**2))
    if params.w3 > 0:
        dv = sqdist(context[rows], context)
        k += params.w3 * np.exp(-dp / (2 * params.sigma_tau**2) - dv / (2 * params.sigma_lambda**2))
    k[np.arange(len(rows)), rows] = 0.0
    return k


class _BruteMessages:
    def __init__(self, image, context, params, shape, block=512):
        h, w = shape
        n = h * w
        if n > BRUTE_FORCE_MAX_PIXELS:
            raise ValueError(f"brute-force inference is limited to {BRUTE_FORCE_MAX_PIXELS} pixels, got {n}")
        pos = _positions(h, w)
        img = image.reshape(len(image), -1).T
        ctx = None if context is None else context.reshape(len(context), -1).T
        self.kernel = np.empty((n, n))
        for start in range(0, n, block):
            rows = np.arange(start, min(start + block, n))
            self.kernel[rows] = _pairwise_rows(img, ctx, params, rows, pos)

    def __call__(self, q):
        r = q.shape[0]
        return (self.kernel @ q.reshape(r, -1).T).T.reshape(q.shape)


def _run(messages_cls, unary, image, context, params):
    params = CrfParams() if params is None else params.validate()
    prob = _as_prob(unary)
    if not params.weights.any():
        return MeanFieldResult(prob.copy(), max_change=(0.0,) * params.iterations)
    image, context = _check_features(image, context, prob.shape[1:], params)
    u = unary_energy(prob)
    messages = messages_cls(image, context, params, prob.shape[1:])
    q = _softmax(-u)
    changes = []
    for _ in range(params.iterations):
        # Potts: penalty for label l is sum_j k_ij (1 - Q_j(l)); the constant part cancels
        new = _softmax(-u + messages(q))
        changes.append(float(np.abs(new - q).max()))
        q = new
    return MeanFieldResult(q, max_change=tuple(changes))


def mean_field(unary, image, context=None, params=None):
    """Approximate marginals by ``params.iterations`` parallel mean-field updates.

    ``unary`` holds class probabilities ``[R, H, W]`` (or a
    :class:`UnaryField`); ``image`` the colour features ``[C, H, W]``;
    ``context`` the per-pixel context vectors ``[3, H, W]``, held fixed.
    The appearance kernel uses the lattice filter; smoothness and context
    kernels are evaluated exactly with separable spatial convolutions.
    """
    return _run(_FastMessages, unary, image, context, params)


def brute_force_mean_field(unary, image, context=None, params=None):
    """Same update as :func:`mean_field` with an explicit dense kernel matrix."""
    return _run(_BruteMessages, unary, image, context, params)


def energy(labels, unary, image, context=None, params=None):
    """Gibbs energy of a labelling.

    ``sum_i -log P_i(x_i) + sum_i sum_{j != i} [x_i != x_j] k(f_i, f_j)``
    where the double sum runs over ordered pairs.
    """
    params = CrfParams() if params is None else params.validate()
    prob = _as_prob(unary)
    labels = np.asarray(labels)
    if labels.shape != prob.shape[1:]:
        raise ValueError(f"labels {labels.shape} do not match unary {prob.shape[1:]}")
    flat = labels.ravel()
    u = unary_energy(prob).reshape(len(prob), -1)
    total = float(u[flat, np.arange(flat.size)].sum())
    if not params.weights.any():
        return total
    image, context = _check_features(image, context, labels.shape, params)
    brute = _BruteMessages(image, context, params, labels.shape)
    differ = flat[:, None] != flat[None, :]
    return total + float((brute.kernel * differ).sum())
