"""
Experiment configuration: a TOML file validated by the serializers in
``pipeline.serializers`` and frozen into a PipelineConfig.
"""
from dataclasses import dataclass, field
import hashlib
import json
import logging
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from geometry.exceptions import InvalidArgumentError
from geometry.optim import OptimConfig
from geometry.types import IntegratorConfig, KernelParams
from transport.ladder import LadderConfig

from .serializers import STAGES, PipelineConfigSerializer

logger = logging.getLogger(__name__)

# Keys that do not change any result and stay out of the hash.
UNHASHED_KEYS = ("output", "workers")


class ConfigError(InvalidArgumentError):
    default_code = "invalid_config"

    def __init__(self, message, errors=None, path=None):
        context = {"path": str(path)} if path is not None else {}
        super().__init__(message, context=context)
        self.errors = errors or {}

    def lines(self, errors=None, prefix=""):
        """Flatten nested serializer errors into 'section.key: message' lines."""
        errors = self.errors if errors is None else errors
        for key, value in sorted(errors.items()):
            name = f"{prefix}{key}"
            if isinstance(value, dict):
                yield from self.lines(value, f"{name}.")
            else:
                messages = value if isinstance(value, (list, tuple)) else [value]
                for message in messages:
                    if isinstance(message, dict):
                        yield from self.lines(message, f"{name}.")
                    else:
                        yield f"{name}: {message}"


def _plain(value):
    """Serializer output (OrderedDicts, lists) as plain JSON-ready values."""
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    return value


@dataclass(frozen=True)
class PipelineConfig:
    values: dict
    base_dir: Path = field(default=Path("."))

    @property
    def config_hash(self):
        hashed = {key: value for key, value in self.values.items() if key not in UNHASHED_KEYS}
        payload = json.dumps(hashed, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def section(self, name):
        return self.values[name]

    @property
    def seed(self):
        return self.values["seed"]

    @property
    def workers(self):
        return self.values["workers"]

    @property
    def kernel(self):
        return KernelParams(self.values["kernel"]["sigma"])

    @property
    def integrator(self):
        section = self.values["integrator"]
        return IntegratorConfig(section["n_steps"], section["scheme"])

    @property
    def alpha(self):
        """Registration alpha, or None for 0.1 x atlas diameter."""
        return self.values["registration"]["alpha"]

    def optim(self, stage):
        if stage not in STAGES:
            raise InvalidArgumentError("unknown optimizer stage", context={"stage": stage})
        return OptimConfig(**self.values["optim"][stage])

    def ladder(self, registration_alpha):
        section = self.values["ladder"]
        return LadderConfig(
            n_rungs=section["n_rungs"],
            rung_scale=section["rung_scale"],
            max_scale_halvings=section["max_scale_halvings"],
            alpha=section["alpha_factor"] * registration_alpha,
            optim=self.optim("ladder"),
        )

    def path(self, *keys):
        """A path-valued key resolved against the config file's directory, or None."""
        value = self.values
        for key in keys:
            value = value[key]
        if value is None:
            return None
        path = Path(value)
        return path if path.is_absolute() else (self.base_dir / path)

    def with_overrides(self, **overrides):
        """Copy with top-level keys replaced (command-line flags win over the file)."""
        values = json.loads(json.dumps(self.values))
        for key, value in overrides.items():
            if value is not None:
                values[key] = str(Path(value).resolve()) if key in ("manifest", "output") else value
        return PipelineConfig(values, self.base_dir)


def validate_config(data, base_dir=Path("."), path=None):
    serializer = PipelineConfigSerializer(data=data)
    if not serializer.is_valid():
        raise ConfigError("invalid configuration", errors=_plain(serializer.errors), path=path)
    return PipelineConfig(_plain(serializer.validated_data), Path(base_dir))


def load_config(path):
    path = Path(path)
    try:
        with open(path, "rb") as handle:
            data = tomllib.load(handle)
    except FileNotFoundError:
        raise ConfigError("config file not found", path=path) from None
    except tomllib.TOMLDecodeError as error:
        raise ConfigError(f"config file is not valid TOML: {error}", path=path) from None
    config = validate_config(data, path.resolve().parent, path)
    logger.info("loaded config %s (hash %s)", path, config.config_hash[:12])
    return config
