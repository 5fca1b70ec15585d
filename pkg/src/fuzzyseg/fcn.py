"""U-Net style segmentation network with fuzzy input and feature blocks."""

import logging
from dataclasses import asdict, dataclass, fields

import numpy as np
from sklearn.base import BaseEstimator

from . import fuzzy
from ._validation import N_CLASSES, check_channel_batch, check_label_map
from .optim import AdamState, adam_step
from .tensor import (
    NonFiniteError,
    Tensor,
    concat,
    conv2d,
    cross_entropy,
    max_pool2d,
    no_grad,
    relu,
    softmax_channels,
    upsample2x,
)

logger = logging.getLogger(__name__)

MEMBERSHIPS = (None, "sigmoid", "gaussian")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class NetworkConfig:
    """Architecture and training hyperparameters.

    ``membership=None`` builds the plain (non-fuzzy) network. ``depth`` is
    the number of 2x2 poolings; ``width`` the channel count of the first
    level, doubled at every level below it.
    """

    in_channels: int = 3
    membership: str | None = "sigmoid"
    width: int = 64
    depth: int = 4
    n_classes: int = N_CLASSES
    image_size: int = 256
    per_pixel: bool = True
    batch_size: int = 4
    epochs: int = 60
    learning_rate: float = 1e-3
    decay: float = 0.95
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    dtype: str = "float32"

    def validate(self):
        if self.membership not in MEMBERSHIPS:
            raise ValueError(f"membership must be one of {MEMBERSHIPS}, got {self.membership!r}")
        if self.in_channels not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if self.n_classes != N_CLASSES:
            raise ValueError(f"n_classes must be {N_CLASSES}")
        if self.depth < 1 or self.width < 1:
            raise ValueError("depth and width must be positive")
        if self.image_size % (2**self.depth):
            raise ValueError(
                f"image_size {self.image_size} is not divisible by 2**depth = {2**self.depth}"
            )
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def conv_layers(cfg):
    """Ordered ``(name, in_channels, out_channels, kernel)`` for every convolution."""
    w, depth = cfg.width, cfg.depth
    layers = []
    c_in = cfg.in_channels
    for lvl in range(depth):
        c = w * 2**lvl
        layers += [(f"enc{lvl}.conv1", c_in, c, 3), (f"enc{lvl}.conv2", c, c, 3)]
        c_in = c
    c = w * 2**depth
    layers += [("bottom.conv1", c_in, c, 3), ("bottom.conv2", c, c, 3)]
    for lvl in reversed(range(depth)):
        c = w * 2**lvl
        layers += [
            (f"dec{lvl}.up", 2 * c, c, 3),
            (f"dec{lvl}.conv1", 2 * c, c, 3),
            (f"dec{lvl}.conv2", c, c, 3),
        ]
    layers.append(("head", w, cfg.n_classes, 1))
    return layers


def parameter_count(cfg):
    """Closed-form number of trainable scalars for ``cfg``."""
    total = sum(f * c * k * k + f for _, c, f, k in conv_layers(cfg))
    if cfg.membership is not None:
        pix = cfg.image_size**2 if cfg.per_pixel else 1
        total += 2 * cfg.n_classes * pix * (cfg.in_channels + cfg.width)
    return total


class UNet:
    """Encoder-decoder network with skip connections.

    When ``cfg.membership`` is set, a fuzzy block processes the input
    channels and another processes the feature maps of the first
    convolution.
    """

    def __init__(self, cfg, rng=None):
        self.cfg = cfg.validate()
        self.dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.seed if rng is None else rng)
        self.params = {}
        for name, c_in, c_out, k in conv_layers(cfg):
            fan_in = c_in * k * k
            # head starts small so initial class distributions are near uniform
            bound = np.sqrt(6.0 / fan_in) if name != "head" else 0.1 * np.sqrt(3.0 / fan_in)
            self.params[f"{name}.w"] = Tensor(
                rng.uniform(-bound, bound, (c_out, c_in, k, k)).astype(self.dtype), True, f"{name}.w"
            )
            self.params[f"{name}.b"] = Tensor(np.zeros(c_out, self.dtype), True, f"{name}.b")
        self.fuzzy_in = self.fuzzy_feat = None
        if cfg.membership is not None:
            self.fuzzy_in = _placeholder_block(cfg, cfg.in_channels, rng, "fuzzy_in", self.dtype)
            self.fuzzy_feat = _placeholder_block(cfg, cfg.width, rng, "fuzzy_feat", self.dtype)
            self.params.update(self.fuzzy_in.parameters())
            self.params.update(self.fuzzy_feat.parameters())

    @property
    def fuzzy(self):
        return self.fuzzy_in is not None

    def parameters(self):
        return dict(self.params)

    def parameter_count(self):
        return sum(p.size for p in self.params.values())

    def _conv(self, name, x, act=True):
        w = self.params[f"{name}.w"]
        y = conv2d(x, w, self.params[f"{name}.b"], padding=w.shape[-1] // 2)
        return relu(y) if act else y

    def first_features(self, x, zero_uncertainty=False):
        """Feature maps of the first convolution (before their fuzzy block)."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, self.dtype))
        if self.fuzzy:
            x = self.fuzzy_in(x, zero_uncertainty)
        return self._conv("enc0.conv1", x)

    def forward(self, x, zero_uncertainty=False):
        """Logits ``[N, R, H, W]`` for an input batch ``[N, D, H, W]``."""
        h = self.first_features(x, zero_uncertainty)
        if self.fuzzy:
            h = self.fuzzy_feat(h, zero_uncertainty)
        h = self._conv("enc0.conv2", h)
        skips = [h]
        for lvl in range(1, self.cfg.depth):
            h = self._conv(f"enc{lvl}.conv2", self._conv(f"enc{lvl}.conv1", max_pool2d(h)))
            skips.append(h)
        h = max_pool2d(h)
        h = self._conv("bottom.conv2", self._conv("bottom.conv1", h))
        for lvl in reversed(range(self.cfg.depth)):
            h = self._conv(f"dec{lvl}.up", upsample2x(h))
            h = concat([h, skips[lvl]], axis=1)
            h = self._conv(f"dec{lvl}.conv2", self._conv(f"dec{lvl}.conv1", h))
        return self._conv("head", h, act=False)

    __call__ = forward

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state):
        """Copy arrays from ``state``; names and shapes must match exactly."""
        missing = [n for n in self.params if n not in state]
        extra = [n for n in state if n not in self.params]
        if missing:
            raise ValueError(f"checkpoint is missing parameter {missing[0]!r}")
        if extra:
            raise ValueError(f"checkpoint has unexpected parameter {extra[0]!r}")
        for name, p in self.params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name!r} has shape {arr.shape}, network expects {p.shape}")
            p.data[...] = arr.astype(self.dtype)
        return self


def _placeholder_block(cfg, channels, rng, name, dtype):
    # data-independent start; train() replaces it with data statistics
    side = cfg.image_size if cfg.per_pixel else 1
    shape = (cfg.n_classes, channels, side, side)
    if cfg.membership == "sigmoid":
        first = rng.uniform(-1.0, 1.0, shape)
        second = np.full(shape, 0.5)
    else:
        first = np.full(shape, 0.5)
        second = np.full(shape, 0.05)
    params = fuzzy.MembershipParams(
        cfg.membership,
        Tensor(first.astype(dtype), True),
        Tensor(second.astype(dtype), True),
    )
    return fuzzy.FuzzyBlock(params, name)


def build_network(cfg):
    return UNet(cfg)


def one_hot(labels, n_classes=N_CLASSES, dtype=np.float64):
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], n_classes) + labels.shape[1:], dtype=dtype)
    np.put_along_axis(out, labels[:, None], 1.0, axis=1)
    return out


def _replace_block(net, block_attr, params):
    old = getattr(net, block_attr)
    for key, t in params.tensors().items():
        name = f"{old.name}.{key}"
        net.params[name].data[...] = t.data.astype(net.dtype)


def initialize_from_data(net, X, Y, rng):
    """Set fuzzy parameters from labelled training data.

    The input block uses per-category channel statistics of ``X``. The
    feature block uses per-category statistics of first-convolution
    features from one warm-up forward pass over the first batch.
    """
    if not net.fuzzy:
        return net
    cfg = net.cfg
    params = fuzzy.init_membership_params(X, Y, cfg.membership, rng, cfg.per_pixel, net.dtype)
    _replace_block(net, "fuzzy_in", params)
    warm = slice(0, min(cfg.batch_size, len(X)))
    with no_grad():
        feats = net.first_features(Tensor(X[warm].astype(net.dtype))).data
    params = fuzzy.init_membership_params(feats, Y[warm], cfg.membership, rng, cfg.per_pixel, net.dtype)
    _replace_block(net, "fuzzy_feat", params)
    return net


def train(net, X, Y, cfg=None, callback=None):
    """Train ``net`` on images ``X [M, D, H, W]`` with labels ``Y [M, H, W]``.

    Runs ``cfg.epochs`` epochs of ``max(1, M // P)`` shuffled batches with
    Adam, multiplying the learning rate by ``cfg.decay`` after each epoch.
    Returns the per-batch loss trace as ``(epoch, batch, loss)`` tuples.
    Deterministic for a fixed ``cfg.seed``.
    """
    cfg = net.cfg if cfg is None else cfg
    X = check_channel_batch(X, cfg.in_channels).astype(net.dtype)
    Y = np.asarray(Y)
    if len(X) == 0:
        raise ValueError("training set is empty")
    if Y.shape != (X.shape[0],) + X.shape[2:]:
        raise ValueError(f"labels {Y.shape} do not match images {X.shape}")
    for y in Y:
        check_label_map(y)
    rng = np.random.default_rng([cfg.seed, 1])
    initialize_from_data(net, X, Y, rng)

    params = list(net.parameters().values())
    state = AdamState(lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    m = len(X)
    p = min(cfg.batch_size, m)
    n_batches = max(1, m // p)
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(m)
        for b in range(n_batches):
            idx = np.sort(order[b * p:(b + 1) * p])
            for t in params:
                t.grad = None
            try:
                probs = softmax_channels(net.forward(Tensor(X[idx])))
                loss = cross_entropy(probs, Tensor(one_hot(Y[idx], cfg.n_classes, net.dtype)))
                loss.backward()
                adam_step(params, state)
            except (NonFiniteError, FloatingPointError) as exc:
                last = trace[-1][2] if trace else float("nan")
                raise TrainingDivergedError(
                    f"training diverged at epoch {epoch} batch {b} (lr={state.lr:.3g}, "
                    f"last finite loss {last:.6g}): {exc}"
                ) from exc
            trace.append((epoch, b, float(loss.data)))
            if callback is not None:
                callback(epoch, b, trace[-1][2])
        state.lr *= cfg.decay
    return trace


@dataclass
class UnaryField:
    """Per-pixel class probabilities ``[R, H, W]`` and their argmax."""

    prob: np.ndarray

    @property
    def labels(self):
        return self.prob.argmax(axis=0)

    def unary_energy(self, floor=1e-12):
        return -np.log(np.maximum(self.prob, floor))


def predict_proba(net, X, batch_size=8):
    X = check_channel_batch(X, net.cfg.in_channels)
    side = net.cfg.image_size
    if net.fuzzy and net.cfg.per_pixel and X.shape[2:] != (side, side):
        raise ValueError(f"input is {X.shape[2]}x{X.shape[3]}, network expects {side}x{side}")
    out = []
    with no_grad():
        for start in range(0, len(X), batch_size):
            chunk = Tensor(X[start:start + batch_size].astype(net.dtype))
            out.append(softmax_channels(net.forward(chunk)).data.astype(np.float64))
    prob = np.concatenate(out)
    # renormalize in float64 after single-precision inference
    return prob / prob.sum(axis=1, keepdims=True)


def infer(net, image):
    """Unary field of one preprocessed ``[D, H, W]`` image."""
    return UnaryField(predict_proba(net, np.asarray(image)[None])[0])


def config_from_state(state, base=None):
    """Recover the architecture encoded in a checkpoint's parameter names and shapes."""
    cfg = NetworkConfig(**(base.to_dict() if base is not None else {}))
    try:
        w = state["enc0.conv1.w"]
    except KeyError:
        raise ValueError("checkpoint is missing parameter 'enc0.conv1.w'") from None
    cfg.width, cfg.in_channels = int(w.shape[0]), int(w.shape[1])
    depth = 0
    while f"enc{depth}.conv1.w" in state:
        depth += 1
    cfg.depth = depth
    if "fuzzy_in.a" in state:
        cfg.membership = "sigmoid"
    elif "fuzzy_in.mu" in state:
        cfg.membership = "gaussian"
    else:
        cfg.membership = None
    if cfg.membership is not None:
        first = next(v for k, v in state.items() if k.startswith("fuzzy_in."))
        cfg.per_pixel = first.shape[-1] > 1
        if cfg.per_pixel:
            cfg.image_size = int(first.shape[-1])
    return cfg


class FuzzyFCNSegmenter(BaseEstimator):
    """Semantic segmentation with a (fuzzy) fully convolutional network.

    Parameters
    ----------
    membership : {'sigmoid', 'gaussian'} or None, default='sigmoid'
        Membership function of the fuzzy blocks; ``None`` trains the plain
        network.
    width : int, default=64
    depth : int, default=4
    epochs : int, default=60
    batch_size : int, default=4
    learning_rate : float, default=1e-3
    decay : float, default=0.95
        Per-epoch learning-rate multiplier.
    per_pixel : bool, default=True
        One membership parameter pair per pixel rather than per channel.
    dtype : {'float32', 'float64'}, default='float32'
    random_state : int, default=0

    Attributes
    ----------
    network_ : UNet
    loss_trace_ : list of (epoch, batch, loss)
    config_ : NetworkConfig
    """

    def __init__(
        self,
        membership="sigmoid",
        width=64,
        depth=4,
        epochs=60,
        batch_size=4,
        learning_rate=1e-3,
        decay=0.95,
        per_pixel=True,
        dtype="float32",
        random_state=0,
    ):
        self.membership = membership
        self.width = width
        self.depth = depth
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.decay = decay
        self.per_pixel = per_pixel
        self.dtype = dtype
        self.random_state = random_state

    def _config(self, X):
        if X.shape[2] != X.shape[3]:
            raise ValueError(f"images must be square, got {X.shape[2]}x{X.shape[3]}")
        return NetworkConfig(
            in_channels=X.shape[1],
            membership=self.membership,
            width=self.width,
            depth=self.depth,
            image_size=X.shape[2],
            per_pixel=self.per_pixel,
            batch_size=self.batch_size,
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            decay=self.decay,
            seed=self.random_state,
            dtype=self.dtype,
        ).validate()

    def fit(self, X, y, callback=None):
        X = check_channel_batch(X)
        self.config_ = self._config(X)
        self.network_ = build_network(self.config_)
        self.loss_trace_ = train(self.network_, X, y, self.config_, callback=callback)
        return self

    def _check_fitted(self):
        if not hasattr(self, "network_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("FuzzyFCNSegmenter is not fitted yet; call fit first")

    def predict_proba(self, X):
        self._check_fitted()
        return predict_proba(self.network_, X)

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def score(self, X, y):
        """Mean IoU over the five classes."""
        from .metrics import mean_iou

        return mean_iou(self.predict(X), y)[1]

    @classmethod
    def from_state(cls, state, base_config=None):
        """Rebuild a fitted estimator from checkpoint arrays."""
        cfg = config_from_state(state, base_config)
        est = cls(
            membership=cfg.membership,
            width=cfg.width,
            depth=cfg.depth,
            per_pixel=cfg.per_pixel,
            dtype=cfg.dtype,
            random_state=cfg.seed,
        )
        est.config_ = cfg
        est.network_ = build_network(cfg).load_state_dict(state)
        est.loss_trace_ = []
        return est
