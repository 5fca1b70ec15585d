"""Flat ``key = value`` run configuration shared by all commands."""

from dataclasses import asdict, dataclass, field, fields

from .densecrf.context import DEFAULT_VECTORS
from .densecrf.inference import CrfParams
from .fcn import NetworkConfig

VARIANTS = {"fuzzy-sigmoid": "sigmoid", "fuzzy-gaussian": "gaussian", "nonfuzzy": None}


class ConfigError(ValueError):
    pass


def _vec(v):
    return ", ".join(f"{x:g}" for x in v)


def _opt(default, help):
    return field(default=default, metadata={"help": help})


@dataclass
class RunConfig:
    seed: int = _opt(0, "master random seed")
    membership: str = _opt("sigmoid", "fuzzy membership: sigmoid, gaussian or none")
    width: int = _opt(64, "channels of the first network level")
    depth: int = _opt(4, "number of pooling levels")
    image_size: int = _opt(256, "network input side length in pixels")
    per_pixel: bool = _opt(True, "one membership parameter pair per pixel")
    batch_size: int = _opt(4, "images per training batch")
    epochs: int = _opt(60, "training epochs")
    learning_rate: float = _opt(1e-3, "initial Adam step size")
    decay: float = _opt(0.95, "learning-rate multiplier applied after every epoch")
    beta1: float = _opt(0.9, "Adam first-moment decay")
    beta2: float = _opt(0.999, "Adam second-moment decay")
    adam_eps: float = _opt(1e-8, "Adam denominator offset")
    dtype: str = _opt("float32", "training precision: float32 or float64")
    equalize: bool = _opt(True, "histogram-equalize images before the network")
    wavelet: bool = _opt(True, "add the two wavelet channels")
    crf: bool = _opt(True, "refine network output with the dense CRF")
    crf_context: bool = _opt(True, "include the anatomy context kernel")
    w1: float = _opt(CrfParams.w1, "appearance kernel weight")
    w2: float = _opt(CrfParams.w2, "smoothness kernel weight")
    w3: float = _opt(CrfParams.w3, "context kernel weight")
    sigma_alpha: float = _opt(CrfParams.sigma_alpha, "appearance kernel spatial bandwidth (px)")
    sigma_beta: float = _opt(CrfParams.sigma_beta, "appearance kernel colour bandwidth")
    sigma_gamma: float = _opt(CrfParams.sigma_gamma, "smoothness kernel bandwidth (px)")
    sigma_tau: float = _opt(CrfParams.sigma_tau, "context kernel spatial bandwidth (px)")
    sigma_lambda: float = _opt(CrfParams.sigma_lambda, "context kernel label-vector bandwidth")
    crf_iterations: int = _opt(CrfParams.iterations, "mean-field iterations")
    context_l1: str = _opt(_vec(DEFAULT_VECTORS[0]), "context vector of background above the tissue")
    context_l2: str = _opt(_vec(DEFAULT_VECTORS[1]), "context vector of fat")
    context_l3: str = _opt(_vec(DEFAULT_VECTORS[2]), "context vector of mammary tissue")
    context_l4: str = _opt(_vec(DEFAULT_VECTORS[3]), "context vector of muscle")
    context_l5: str = _opt(_vec(DEFAULT_VECTORS[4]), "context vector of background below the tissue")
    context_l6: str = _opt(_vec(DEFAULT_VECTORS[5]), "context vector of tumor")
    folds: int = _opt(10, "number of cross-validation folds")
    fold: int = _opt(0, "fold held out for testing")
    phantom_count: int = _opt(200, "phantoms generated by the pipeline command")
    phantom_size: int = _opt(64, "phantom side length in pixels")

    def validate(self):
        if self.membership not in ("sigmoid", "gaussian", "none"):
            raise ConfigError(f"membership must be sigmoid, gaussian or none, got {self.membership!r}")
        if not 0 <= self.fold < self.folds:
            raise ConfigError(f"fold must be in 0..{self.folds - 1}, got {self.fold}")
        self.network_config()
        self.crf_params()
        self.context_vectors()
        return self

    def network_config(self):
        try:
            return NetworkConfig(
                in_channels=3 if self.wavelet else 1,
                membership=None if self.membership == "none" else self.membership,
                width=self.width,
                depth=self.depth,
                image_size=self.image_size,
                per_pixel=self.per_pixel,
                batch_size=self.batch_size,
                epochs=self.epochs,
                learning_rate=self.learning_rate,
                decay=self.decay,
                beta1=self.beta1,
                beta2=self.beta2,
                adam_eps=self.adam_eps,
                seed=self.seed,
                dtype=self.dtype,
            ).validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def crf_params(self):
        p = CrfParams(
            w1=self.w1,
            w2=self.w2,
            w3=self.w3 if self.crf_context else 0.0,
            sigma_alpha=self.sigma_alpha,
            sigma_beta=self.sigma_beta,
            sigma_gamma=self.sigma_gamma,
            sigma_tau=self.sigma_tau,
            sigma_lambda=self.sigma_lambda,
            iterations=self.crf_iterations,
        )
        try:
            return p.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def context_vectors(self):
        out = []
        for i in range(1, 7):
            raw = getattr(self, f"context_l{i}")
            try:
                vec = tuple(float(x) for x in raw.split(","))
            except ValueError:
                raise ConfigError(f"context_l{i} must be three comma-separated numbers, got {raw!r}") from None
            if len(vec) != 3:
                raise ConfigError(f"context_l{i} must have three components, got {raw!r}")
            out.append(vec)
        return tuple(out)

    def to_text(self):
        return "".join(f"{k} = {_format(v)}\n" for k, v in asdict(self).items())

    def update(self, values):
        """Apply ``{key: raw string or value}`` overrides, rejecting unknown keys."""
        types = {f.name: f.type for f in fields(self)}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown configuration key {key!r}")
            setattr(self, key, _coerce(key, raw, getattr(self, key)))
        return self


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(key, raw, current):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("true", "on", "yes", "1"):
                return True
            if low in ("false", "off", "no", "0"):
                return False
            raise ValueError
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for {key} (expected {type(current).__name__})") from None
    return raw


def parse_config_values(text, source="<config>"):
    """Raw ``{key: value}`` pairs of ``key = value`` lines; ``#`` starts a comment."""
    keys = {f.name for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in keys:
            raise ConfigError(f"{source}:{lineno}: unknown configuration key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = raw
    return values


def parse_config_text(text, source="<config>", base=None):
    cfg = RunConfig() if base is None else base
    try:
        return cfg.update(parse_config_values(text, source))
    except ConfigError as exc:
        if str(exc).startswith(source):
            raise
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path, base=None):
    with open(path) as fh:
        return parse_config_text(fh.read(), str(path), base)


def help_text():
    """One line per key with its default, for ``--help``."""
    return "\n".join(f"  {f.name} = {_format(f.default)}  ({f.metadata['help']})" for f in fields(RunConfig))
