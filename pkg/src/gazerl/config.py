"""Experiment configuration: a flat key=value file format plus CLI overrides.

Configs are deliberately flat (no sections, no nesting) so that a run's
resolved configuration is a small, diff-able text file.  Every field has a
default; loading a file fills in whatever it does not mention, and the fully
resolved config is written next to the run's outputs.  Resolution is
idempotent: loading a resolved config yields the same config back.
"""

from dataclasses import dataclass, fields, replace

from .rl import PPOConfig, TrainerConfig

VARIANT_CHOICES = ("baseline", "patch", "foveal", "foveal+contrastive")
TASK_CHOICES = ("clean", "clutter")

# the three ablation axes exposed by the CLI, all plain config fields
ABLATION_AXES = ("buffer_size", "lambda_attn", "update_freq")


class ConfigError(ValueError):
    """Raised for unknown keys, malformed values, or out-of-range fields."""


@dataclass
class ExperimentConfig:
    """One training run, fully described by flat scalar fields."""

    # identity and placement
    out_dir: str = "runs/exp"
    seed: int = 0
    variant: str = "foveal+contrastive"
    task: str = "clean"

    # budget and rollout shape
    total_steps: int = 200_000
    num_envs: int = 64
    num_steps: int = 16
    episode_len: int = 50

    # artifact cadence (0 disables periodic heatmaps; first/last still saved)
    heatmap_every: int = 50

    # optimization
    learning_rate: float = 3e-4
    gamma: float = 0.9
    gae_lambda: float = 0.9
    clip_range: float = 0.2
    epochs: int = 8
    num_minibatches: int = 32
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    log_std_init: float = 0.0
    max_grad_norm: float = 0.5
    target_kl: float = 0.2

    # attention / contrastive
    lambda_attn: float = 0.1
    lambda_spread: float = 0.1
    triplet_margin: float = 0.5
    sigma_target: float = 0.1
    buffer_size: int = 100_000
    n_anchors: int = 1024
    knn_k: int = 16
    update_freq: int = 1

    def validate(self):
        if self.variant not in VARIANT_CHOICES:
            raise ConfigError(
                f"variant: got {self.variant!r}, expected one of {VARIANT_CHOICES}")
        if self.task not in TASK_CHOICES:
            raise ConfigError(f"task: got {self.task!r}, expected one of {TASK_CHOICES}")
        if self.seed < 0:
            raise ConfigError(f"seed: must be nonnegative, got {self.seed}")
        for name in ("total_steps", "num_envs", "num_steps", "episode_len", "epochs",
                     "num_minibatches", "buffer_size", "n_anchors", "knn_k",
                     "update_freq"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ConfigError(f"{name}: must be a positive integer, got {v!r}")
        if self.heatmap_every < 0:
            raise ConfigError(f"heatmap_every: must be >= 0, got {self.heatmap_every}")
        for name in ("learning_rate", "clip_range", "max_grad_norm", "target_kl",
                     "sigma_target"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name}: must be positive, got {getattr(self, name)}")
        for name in ("gamma", "gae_lambda"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"{name}: must lie in (0, 1], got {v}")
        for name in ("value_coef", "entropy_coef", "lambda_attn", "lambda_spread",
                     "triplet_margin"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0, got {getattr(self, name)}")
        if self.num_minibatches > self.num_envs * self.num_steps:
            raise ConfigError(
                f"num_minibatches: {self.num_minibatches} exceeds the "
                f"{self.num_envs * self.num_steps} samples collected per iteration")
        return self

    def to_trainer_config(self):
        """Map the flat experiment view onto the trainer's nested config."""
        ppo = PPOConfig(
            learning_rate=self.learning_rate, gamma=self.gamma,
            gae_lambda=self.gae_lambda, clip_range=self.clip_range,
            epochs=self.epochs, num_minibatches=self.num_minibatches,
            value_coef=self.value_coef, entropy_coef=self.entropy_coef,
            log_std_init=self.log_std_init,
            max_grad_norm=self.max_grad_norm, target_kl=self.target_kl,
            lambda_attn=self.lambda_attn, lambda_spread=self.lambda_spread,
            triplet_margin=self.triplet_margin, sigma_target=self.sigma_target,
            buffer_capacity=self.buffer_size, n_anchors=self.n_anchors,
            knn_k=self.knn_k, update_freq=self.update_freq)
        variant = "foveal" if self.variant == "foveal+contrastive" else self.variant
        return TrainerConfig(
            seed=self.seed, variant=variant,
            contrastive=self.variant == "foveal+contrastive",
            clutter=self.task == "clutter", num_envs=self.num_envs,
            num_steps=self.num_steps, episode_len=self.episode_len,
            total_steps=self.total_steps, ppo=ppo)


_FIELDS = {f.name: f.type for f in fields(ExperimentConfig)}


def parse_scalar(text):
    """One TOML-style scalar: int, float, true/false, or a (quoted) string."""
    s = text.strip()
    if not s:
        raise ConfigError("empty value")
    if len(s) >= 2 and s[0] == s[-1] and s[0] in "\"'":
        return s[1:-1]
    low = s.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        pass
    return s


def format_scalar(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    return '"' + str(value) + '"'


def _coerce(key, value):
    """Fit a parsed scalar to the declared field type, or complain."""
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    want = _FIELDS[key]
    if want == "str" or want is str:
        return str(value)
    if want == "int" or want is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        if isinstance(value, float):
            if value != int(value):
                raise ConfigError(f"{key}: expected an integer, got {value!r}")
            value = int(value)
        return value
    if want == "float" or want is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    raise ConfigError(f"{key}: unsupported field type {want!r}")


def parse_config_text(text):
    """key = value lines -> dict; '#' starts a comment, blank lines ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        out[key] = _coerce(key, parse_scalar(val))
    return out


def load_config(path, overrides=()):
    """Read a config file, apply --set overrides, validate, return the config."""
    with open(path) as fh:
        values = parse_config_text(fh.read())
    cfg = replace(ExperimentConfig(), **values)
    cfg = apply_overrides(cfg, overrides)
    return cfg.validate()


def apply_overrides(cfg, overrides):
    """Each override is a 'key=value' string, same grammar as the file body."""
    values = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, _, val = item.partition("=")
        values[key.strip()] = _coerce(key.strip(), parse_scalar(val))
    return replace(cfg, **values) if values else cfg


def config_to_text(cfg):
    """Serialize every field, in declaration order, one key per line."""
    lines = [f"{f.name} = {format_scalar(getattr(cfg, f.name))}"
             for f in fields(ExperimentConfig)]
    return "\n".join(lines) + "\n"


def save_config(cfg, path):
    with open(path, "w") as fh:
        fh.write(config_to_text(cfg))
