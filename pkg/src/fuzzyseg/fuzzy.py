"""Trainable fuzzification, uncertainty representation and fusion.

Tensors follow the layout ``[N, R, D, H, W]`` for per-category data
(batch, category, channel, row, column) and ``[N, D, H, W]`` for channel
data. Unbatched inputs (``[D, H, W]``) are accepted by the public
functions and returned without the batch axis.

Pipeline for one block::

    memberships  = fuzzify(x, params)              # per category
    normalized   = normalize_memberships(memberships)
    per_category = uncertainty(normalized)
    overall      = overall_uncertainty(per_category)   # fuzzy AND (min)
    out          = fuse(overall, x)                    # (1 - u) * x
"""

import logging
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, make_op

logger = logging.getLogger(__name__)

N_CLASSES = 5
VAR_MIN = 1e-4
NORM_EPS = 1e-12
KINDS = ("sigmoid", "gaussian")


@dataclass
class MembershipParams:
    """Trainable membership parameters for one fuzzy block.

    ``first``/``second`` hold ``(a, b)`` for the sigmoid kind and
    ``(mu, var)`` for the gaussian kind, each shaped ``[R, D, H, W]``
    (per-pixel) or ``[R, D, 1, 1]`` (shared across pixels).
    """

    kind: str
    first: Tensor
    second: Tensor

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"membership kind must be one of {KINDS}, got {self.kind!r}")
        if self.first.shape != self.second.shape or self.first.ndim != 4:
            raise ValueError(
                f"membership parameters need matching 4-D shapes, got {self.first.shape} and {self.second.shape}"
            )

    @property
    def names(self):
        return ("a", "b") if self.kind == "sigmoid" else ("mu", "var")

    @property
    def n_categories(self):
        return self.first.shape[0]

    @property
    def n_channels(self):
        return self.first.shape[1]

    @property
    def parameter_count(self):
        return self.first.size + self.second.size

    def tensors(self):
        return {self.names[0]: self.first, self.names[1]: self.second}


def _batched(x):
    x = as_tensor(x)
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected [D, H, W] or [N, D, H, W] input, got shape {x.shape}")
    return x, False


def _unbatch(t, squeeze):
    return t.reshape(t.shape[1:]) if squeeze else t


def _check_params_fit(x, params):
    _, d, h, w = x.shape
    _, pd, ph, pw = params.first.shape
    if pd != d or (ph, pw) not in ((h, w), (1, 1)):
        raise ValueError(
            f"membership parameters {params.first.shape} do not fit input with D={d}, H={h}, W={w}"
        )


def fuzzify(x, params):
    """Membership of every pixel in every category.

    Sigmoid: ``1 / (1 + exp(a (x - b)))``. Gaussian:
    ``exp(-(x - mu)^2 / (2 var))`` with ``var`` clamped below at
    :data:`VAR_MIN`. Returns ``[N, R, D, H, W]`` (or ``[R, D, H, W]``).
    """
    xb, squeeze = _batched(x)
    _check_params_fit(xb, params)
    xd = xb.data[:, None]
    p1, p2 = params.first, params.second
    if params.kind == "sigmoid":
        a, b = p1.data, p2.data
        diff = xd - b
        out = 0.5 * (1.0 - np.tanh(0.5 * a * diff))

        def vjp(g):
            s = -g * out * (1.0 - out)
            gx = (s * a).sum(axis=1)
            return gx, s * diff, -s * a

    else:
        mu = p1.data
        live = p2.data > VAR_MIN
        var = np.where(live, p2.data, VAR_MIN)
        diff = xd - mu
        out = np.exp(-(diff * diff) / (2.0 * var))

        def vjp(g):
            s = g * out
            gx = (-s * diff / var).sum(axis=1)
            return gx, s * diff / var, s * diff * diff / (2.0 * var * var) * live

    res = make_op(out.astype(xb.dtype, copy=False), (xb, p1, p2), vjp, f"fuzzify_{params.kind}")
    return _unbatch(res, squeeze)


def normalize_memberships(m):
    """Divide memberships by their sum over categories (axis -4)."""
    m = as_tensor(m)
    if np.any(m.data < 0):
        raise ValueError("memberships must be non-negative")
    total = m.data.sum(axis=-4, keepdims=True)
    total = np.maximum(total, NORM_EPS)
    out = m.data / total

    def vjp(g):
        return ((g - (g * out).sum(axis=-4, keepdims=True)) / total,)

    return make_op(out, (m,), vjp, "normalize_memberships")


def gaussian_normalized(x, params):
    """Gaussian memberships already normalized over categories.

    Equal to ``normalize_memberships(fuzzify(x, params))`` but evaluated as
    a softmax of log-memberships, so it stays defined when every raw
    membership underflows to zero.
    """
    if params.kind != "gaussian":
        raise ValueError("gaussian_normalized needs gaussian membership parameters")
    xb, squeeze = _batched(x)
    _check_params_fit(xb, params)
    xd = xb.data[:, None]
    mu, vt = params.first, params.second
    live = vt.data > VAR_MIN
    var = np.where(live, vt.data, VAR_MIN)
    diff = xd - mu.data
    logit = -(diff * diff) / (2.0 * var)
    logit = logit - logit.max(axis=1, keepdims=True)
    e = np.exp(logit)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        gl = out * (g - (g * out).sum(axis=1, keepdims=True))
        gx = (-gl * diff / var).sum(axis=1)
        return gx, gl * diff / var, gl * diff * diff / (2.0 * var * var) * live

    res = make_op(out.astype(xb.dtype, copy=False), (xb, mu, vt), vjp, "gaussian_normalized")
    return _unbatch(res, squeeze)


def uncertainty(m):
    """Per-category uncertainty ``1 - |2m - 1|``.

    Equals ``2m`` below 0.5 and ``2(1 - m)`` above; at exactly 0.5 the
    value is 1 and the subgradient used is 0.
    """
    m = as_tensor(m)
    t = 2.0 * m.data - 1.0
    out = 1.0 - np.abs(t)

    def vjp(g):
        return (-2.0 * np.sign(t) * g,)

    return make_op(out, (m,), vjp, "uncertainty")


def overall_uncertainty(u):
    """Fuzzy AND over categories: minimum along axis -4.

    The gradient goes to the minimizing category; ties resolve to the
    lowest category index.
    """
    u = as_tensor(u)
    ax = u.ndim - 4
    idx = np.expand_dims(np.argmin(u.data, axis=ax), ax)
    out = np.take_along_axis(u.data, idx, axis=ax)

    def vjp(g):
        gu = np.zeros(u.shape, dtype=g.dtype)
        np.put_along_axis(gu, idx, np.expand_dims(g, ax), axis=ax)
        return (gu,)

    return make_op(np.squeeze(out, axis=ax), (u,), vjp, "overall_uncertainty")


def fuse(u, carrier):
    """Attenuate ``carrier`` by ``1 - u`` elementwise."""
    u = as_tensor(u)
    carrier = as_tensor(carrier)
    if u.shape != carrier.shape:
        raise ValueError(f"fuse needs matching shapes, got {u.shape} and {carrier.shape}")
    return (1.0 - u) * carrier


def category_statistics(channels, labels, n_classes=N_CLASSES):
    """Per-category, per-channel mean and population variance.

    Parameters
    ----------
    channels : ndarray of shape (M, D, H, W)
    labels : integer ndarray of shape (M, H, W)

    Returns
    -------
    mean, var : ndarrays of shape (n_classes, D)
    present : bool ndarray of shape (n_classes,)
    """
    channels = np.asarray(channels, dtype=np.float64)
    labels = np.asarray(labels)
    if channels.ndim != 4 or labels.shape != (channels.shape[0],) + channels.shape[2:]:
        raise ValueError(f"channels {channels.shape} and labels {labels.shape} are not paired")
    d = channels.shape[1]
    flat = channels.transpose(1, 0, 2, 3).reshape(d, -1)
    lab = labels.reshape(-1)
    mean = np.empty((n_classes, d))
    var = np.empty((n_classes, d))
    present = np.zeros(n_classes, dtype=bool)
    for r in range(n_classes):
        sel = lab == r
        if sel.any():
            present[r] = True
            vals = flat[:, sel]
            mean[r] = vals.mean(axis=1)
            var[r] = vals.var(axis=1)
        else:
            logger.warning("category %d absent from the training data; using global statistics", r)
            mean[r] = flat.mean(axis=1)
            var[r] = flat.var(axis=1)
    return mean, var, present


def init_membership_params(channels, labels, kind, rng=None, per_pixel=True, dtype=np.float64, n_classes=N_CLASSES):
    """Initialize membership parameters from labelled training data.

    Sigmoid: ``b`` is the category mean of each channel, ``a`` is drawn
    from U[-1, 1]. Gaussian: ``mu`` and ``var`` are the category mean and
    variance (variance clamped below at :data:`VAR_MIN`). With
    ``per_pixel`` the statistics are broadcast to every pixel, giving
    ``2 * R * H * W * D`` parameters; otherwise one pair per category and
    channel.
    """
    if kind not in KINDS:
        raise ValueError(f"membership kind must be one of {KINDS}, got {kind!r}")
    rng = np.random.default_rng(rng)
    mean, var, _ = category_statistics(channels, labels, n_classes)
    _, d, h, w = np.shape(channels)
    shape = (n_classes, d, h, w) if per_pixel else (n_classes, d, 1, 1)
    loc = np.broadcast_to(mean[:, :, None, None], shape).astype(dtype)
    if kind == "sigmoid":
        first = rng.uniform(-1.0, 1.0, size=shape).astype(dtype)
        second = loc.copy()
    else:
        first = loc.copy()
        second = np.broadcast_to(np.maximum(var, VAR_MIN)[:, :, None, None], shape).astype(dtype)
    return MembershipParams(
        kind,
        Tensor(first, requires_grad=True),
        Tensor(np.array(second), requires_grad=True),
    )


class FuzzyBlock:
    """Fuzzification, uncertainty representation and fusion of a channel stack."""

    def __init__(self, params, name="fuzzy"):
        self.params = params
        self.name = name
        for key, t in params.tensors().items():
            t.name = f"{name}.{key}"

    def parameters(self):
        return {t.name: t for t in self.params.tensors().values()}

    def memberships(self, x):
        if self.params.kind == "gaussian":
            return gaussian_normalized(x, self.params)
        return normalize_memberships(fuzzify(x, self.params))

    def maps(self, x):
        """Intermediate maps, for inspection and heatmap dumps."""
        m = self.memberships(x)
        u = uncertainty(m)
        return {"membership": m, "uncertainty": u, "overall": overall_uncertainty(u)}

    def __call__(self, x, zero_uncertainty=False):
        x = as_tensor(x)
        if zero_uncertainty:
            u = Tensor(np.zeros(x.shape, dtype=x.dtype))
        else:
            u = overall_uncertainty(uncertainty(self.memberships(x)))
        return fuse(u, x)
