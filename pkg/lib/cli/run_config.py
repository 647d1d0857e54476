import dataclasses
import logging
import os
from dataclasses import dataclass

from lib.diffusion.diffusion_constants import DiffusionDefaults
from lib.dvae.dvae_constants import TrainingDefaults
from lib.exceptions import ConfigError
from lib.manifolds.manifold_constants import ManifoldDefaults
from lib.nets.nets_constants import NetDefaults

logger = logging.getLogger(__name__)

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class RunConfig:
    """
    Every value a training or evaluation run depends on. Written verbatim to
    the run directory as config.txt.
    """
    manifold: str = "flat-torus"
    major_radius: float = ManifoldDefaults.MAJOR_RADIUS
    minor_radius: float = ManifoldDefaults.MINOR_RADIUS
    t_min: float = DiffusionDefaults.T_MIN
    t_max: float = DiffusionDefaults.T_MAX
    walk_steps: int = DiffusionDefaults.WALK_STEPS
    width: int = NetDefaults.HIDDEN_WIDTH
    encoder_layers: int = NetDefaults.ENCODER_HIDDEN_LAYERS
    decoder_layers: int = NetDefaults.DECODER_HIDDEN_LAYERS
    activation: str = NetDefaults.HIDDEN_ACTIVATION
    lr: float = NetDefaults.LEARNING_RATE
    beta1: float = NetDefaults.BETA1
    beta2: float = NetDefaults.BETA2
    adam_eps: float = NetDefaults.ADAM_EPSILON
    epochs: int = TrainingDefaults.EPOCHS_SYNTHETIC
    batch_size: int = TrainingDefaults.BATCH_SIZE
    eval_every: int = TrainingDefaults.EVAL_EVERY
    seed: int = 0
    dataset: str = ""
    labels: str = ""
    likelihood: str = "gaussian"
    kl_mode: str = ""
    samples: int = TrainingDefaults.IMPORTANCE_SAMPLES
    record_wall_time: bool = False
    out: str = "runs"

    @classmethod
    def field_names(cls):
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_mapping(cls, mapping, base=None):
        """
        Overlays string values onto base (defaults when omitted), coercing each to its field type.

        Raises:
            ConfigError: Unknown key or a value of the wrong type.
        """
        config = dataclasses.replace(base) if base is not None else cls()
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in mapping.items():
            name = key.strip().replace("-", "_")
            if name not in types:
                raise ConfigError(f"unknown config key '{key}'")
            setattr(config, name, _coerce(name, types[name], raw))
        return config

    def validate(self):
        """
        Raises:
            ConfigError: The first invalid value found.
        """
        if self.manifold not in ManifoldDefaults.NAME_TABLE:
            raise ConfigError(f"unknown manifold '{self.manifold}'")
        if not 0.0 < self.t_min < self.t_max:
            raise ConfigError(f"need 0 < t_min < t_max, got t_min={self.t_min}, t_max={self.t_max}")
        if self.activation not in NetDefaults.ACTIVATIONS:
            raise ConfigError(f"activation must be one of {NetDefaults.ACTIVATIONS}, got '{self.activation}'")
        if self.likelihood not in TrainingDefaults.LIKELIHOODS:
            raise ConfigError(f"likelihood must be one of {TrainingDefaults.LIKELIHOODS}, got '{self.likelihood}'")
        if self.kl_mode and self.kl_mode not in TrainingDefaults.KL_MODES:
            raise ConfigError(f"kl_mode must be one of {TrainingDefaults.KL_MODES}, got '{self.kl_mode}'")
        for name in ("walk_steps", "width", "encoder_layers", "decoder_layers", "batch_size", "samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("epochs", "eval_every", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.lr <= 0.0 or not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0 or self.adam_eps <= 0.0:
            raise ConfigError("Adam settings need lr > 0, 0 <= beta1, beta2 < 1 and eps > 0")
        if self.major_radius <= self.minor_radius or self.minor_radius <= 0.0:
            raise ConfigError(f"need major_radius > minor_radius > 0, got {self.major_radius}, {self.minor_radius}")
        return self

    def adopt(self, settings):
        """
        Copy with the given settings (read from a checkpoint) replacing the
        configured ones; every replaced value is logged.
        """
        adopted = dataclasses.replace(self)
        for name, value in settings.items():
            current = getattr(adopted, name)
            if current != value:
                logger.warning("resume: %s = %s from the checkpoint replaces %s", name, value, current)
                setattr(adopted, name, value)
        return adopted.validate()

    def to_text(self):
        return "".join(f"{name} = {_render(getattr(self, name))}\n" for name in self.field_names())

    def write(self, path):
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(self.to_text())


def _coerce(name, kind, raw):
    if not isinstance(raw, str):
        return raw
    value = raw.strip()
    try:
        if kind in (bool, "bool"):
            lowered = value.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(value)
        if kind in (int, "int"):
            return int(value)
        if kind in (float, "float"):
            return float(value)
    except ValueError as error:
        raise ConfigError(f"config key '{name}' cannot take value '{raw}'") from error
    return value


def _render(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text, source="<config>"):
    """
    Reads UTF-8 `key = value` lines; '#' starts a comment.

    Returns:
        dict: key -> raw string value, later lines winning.
    """
    mapping = {}
    for number, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got '{line.strip()}'")
        key, value = content.split("=", 1)
        mapping[key.strip()] = value.strip()
    return mapping


def load_run_config(path=None, overrides=None):
    """
    Defaults, then the config file, then command-line overrides; validated.
    """
    config = RunConfig()
    if path:
        with open(path, encoding="utf-8") as handle:
            config = RunConfig.from_mapping(parse_config_text(handle.read(), path), config)
    if overrides:
        config = RunConfig.from_mapping({k: v for k, v in overrides.items() if v is not None}, config)
    return config.validate()


def create_run_directory(base, name):
    """
    Creates base/name, or base/name-1, base/name-2, ... if taken. Never reuses a directory.
    """
    os.makedirs(base, exist_ok=True)
    candidate = os.path.join(base, name)
    suffix = 0
    while True:
        try:
            os.makedirs(candidate)
            logger.info("created run directory %s", candidate)
            return candidate
        except FileExistsError:
            suffix += 1
            candidate = os.path.join(base, f"{name}-{suffix}")
