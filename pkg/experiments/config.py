"""
Experiment configuration files.

A config is an INI file with [experiment], [teacher], [student], [hmc], [eval]
and [data] sections. Keys flatten to <section>_<key>; command-line overrides
are applied to the flat dict, which ExperimentConfigSerializer then validates.
"""
import configparser
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

from django.conf import settings

from lab.exceptions import ConfigError

logger = logging.getLogger(__name__)

SECTIONS = ("experiment", "teacher", "student", "hmc", "eval", "data")

EXPERIMENTS = ("toy2d", "toy1d", "boston", "mnist", "conjugate-check")
METHODS = ("sgd", "sgld", "hmc", "distill")
HMC_EXPERIMENTS = ("toy2d", "toy1d", "conjugate-check")
CONJUGATE_METHODS = ("sgld", "hmc")
REGRESSION_EXPERIMENTS = ("toy1d", "boston", "conjugate-check")

RESOLVED_CONFIG_NAME = "config.resolved.cfg"


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    method: str
    seed: int = 0
    n_trials: int = 1
    output_dir: Path = None
    workers: int = 1
    source: str = ""
    scale: str = ""
    # validated <section>_<key> values of the teacher/student/hmc/eval/data sections
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError("experiment_name", f"unknown experiment {self.experiment!r}")
        if self.method not in METHODS:
            raise ConfigError("experiment_method", f"unknown method {self.method!r}")
        if self.method == "hmc" and self.experiment not in HMC_EXPERIMENTS:
            raise ConfigError("experiment_method", f"hmc is only available for {', '.join(HMC_EXPERIMENTS)}")
        if self.experiment == "conjugate-check" and self.method not in CONJUGATE_METHODS:
            raise ConfigError("experiment_method", "conjugate-check runs the sgld or hmc samplers only")
        if self.n_trials < 1:
            raise ConfigError("experiment_n_trials", f"need at least one trial, got {self.n_trials}")
        if self.workers < 1:
            raise ConfigError("experiment_workers", f"need at least one worker, got {self.workers}")
        if self.output_dir is None:
            default = settings.OUTPUT_DIR / f"{self.experiment}_{self.method}_seed{self.seed}"
            object.__setattr__(self, "output_dir", default)
        object.__setattr__(self, "output_dir", Path(self.output_dir))

    @property
    def is_regression(self):
        return self.experiment in REGRESSION_EXPERIMENTS

    def get(self, key, default=None):
        value = self.options.get(key)
        return default if value is None else value

    def flat(self):
        """Every resolved setting as <section>_<key> pairs."""
        return {
            "experiment_name": self.experiment,
            "experiment_method": self.method,
            "experiment_seed": self.seed,
            "experiment_n_trials": self.n_trials,
            "experiment_out": str(self.output_dir),
            "experiment_workers": self.workers,
            "experiment_source": self.source,
            "experiment_scale": self.scale,
            **self.options,
        }


def read_config_file(path):
    """Parse an INI config into a flat {<section>_<key>: text} dict."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        with open(path, "r") as handle:
            parser.read_file(handle)
    except FileNotFoundError as e:
        raise ConfigError("config", f"file {path} not found") from e
    except configparser.Error as e:
        raise ConfigError("config", f"cannot parse {path} ({e})") from e

    flat = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(section, f"unknown section, expected one of {', '.join(SECTIONS)}")
        for key, value in parser.items(section):
            flat[f"{section}_{key}"] = value
    return flat


def parse_override(text):
    """'teacher.eta=1e-5' -> ('teacher_eta', '1e-5')."""
    key, sep, value = text.partition("=")
    section, dot, name = key.strip().partition(".")
    if not sep or not dot or not name.strip():
        raise ConfigError("--set", f"{text!r} must look like section.key=value")
    if section not in SECTIONS:
        raise ConfigError("--set", f"unknown section {section!r} in {text!r}")
    return f"{section}_{name.strip()}", value.strip()


def resolve_values(path, overrides=(), seed=None, out=None, workers=None):
    flat = read_config_file(path)
    for text in overrides:
        key, value = parse_override(text)
        flat[key] = value
    if seed is not None:
        flat["experiment_seed"] = seed
    if out is not None:
        flat["experiment_out"] = str(out)
    if workers is not None:
        flat["experiment_workers"] = workers
    return flat


def build_config(values):
    """Validate a flat dict; the first offending field becomes a ConfigError."""
    from .serializers import ExperimentConfigSerializer

    serializer = ExperimentConfigSerializer(data=values)
    if not serializer.is_valid():
        name, messages = next(iter(serializer.errors.items()))
        raise ConfigError(name, " ".join(str(message) for message in messages))
    return serializer.save()


def load_experiment_config(path, overrides=(), seed=None, out=None, workers=None):
    config = build_config(resolve_values(path, overrides, seed, out, workers))
    logger.info(f"Loaded {config.experiment}/{config.method} config from {path}")
    return config


def _render_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_config(config):
    """The resolved config as INI text; reading it back reproduces the run."""
    parser = configparser.ConfigParser(interpolation=None)
    for section in SECTIONS:
        parser.add_section(section)
    for key, value in sorted(config.flat().items()):
        if value is None or value == "":
            continue
        section, _, name = key.partition("_")
        parser.set(section, name, _render_value(value))
    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()
