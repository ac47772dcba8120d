"""Run configuration and its INI-style text form.

A config file has up to three sections::

    [train]   learning_rate, batch_size, steps, seed, checkpoint_every, ...
    [model]   image_size, channels, conditioning_mode, T, ...
    [ranges]  gamma, contrast, gauss_sigma, poisson_lambda, noise_mode, ...

Range values are written ``lo,hi``; ``channels`` is a comma list.  Any key
or section not listed here is rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, replace

from .denoiser import DenoiserConfig
from .ispt import ParamRanges
from .nn.tensor import ConfigError

FULL_SCALE_LR = 1.6e-5


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1.6e-4
    batch_size: int = 8
    steps: int = 2000
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    grad_clip: float = 1.0
    num_scenes: int = 256  # synthetic training set size
    data_seed: int = 1
    log_every: int = 0
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    ranges: ParamRanges = field(default_factory=ParamRanges)

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "steps", "num_scenes", "grad_clip"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"train.{name} must be positive, got {getattr(self, name)}")
        if self.checkpoint_every < 0 or self.log_every < 0:
            raise ConfigError("checkpoint_every and log_every must be >= 0")

    @property
    def T(self) -> int:
        return self.model.T

    @property
    def image_size(self) -> int:
        return self.model.image_size

    @classmethod
    def preset(cls, name: str) -> "TrainConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return PRESETS[name]


PRESETS = {
    "default": TrainConfig(),
    # full 200-step chain with the full-scale optimiser settings
    "fullscale": TrainConfig(learning_rate=FULL_SCALE_LR, model=DenoiserConfig(T=200)),
    # narrower than the default widths so 2000 steps fit in about 20 CPU minutes
    "desk": TrainConfig(steps=2000, model=DenoiserConfig(image_size=32, channels=(24, 48, 96), T=50)),
    "tiny": TrainConfig(steps=20, batch_size=4, num_scenes=16,
                        model=DenoiserConfig(image_size=16, channels=(8, 16), T=20, time_embed_dim=16)),
}

_TRAIN_KEYS = [f.name for f in dataclasses.fields(TrainConfig) if f.name not in ("model", "ranges")]
_MODEL_KEYS = [f.name for f in dataclasses.fields(DenoiserConfig)]
_RANGE_KEYS = [f.name for f in dataclasses.fields(ParamRanges)]
SECTIONS = {"train": _TRAIN_KEYS, "model": _MODEL_KEYS, "ranges": _RANGE_KEYS}


def _parse(section: str, key: str, raw: str, current):
    where = f"[{section}] {key}"
    try:
        if key == "channels":
            return tuple(int(c) for c in raw.split(",") if c.strip())
        if isinstance(current, tuple):
            lo, hi = (float(v) for v in raw.split(","))
            return (lo, hi)
        if isinstance(current, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def apply_overrides(cfg: TrainConfig, values: dict[str, dict[str, str]], origin: str = "config") -> TrainConfig:
    """Return ``cfg`` with string ``values[section][key]`` applied."""
    parts = {"train": {}, "model": {}, "ranges": {}}
    targets = {"train": cfg, "model": cfg.model, "ranges": cfg.ranges}
    for section, kv in values.items():
        if section not in SECTIONS:
            raise ConfigError(f"{origin}: unknown section [{section}]")
        for key, raw in kv.items():
            if key not in SECTIONS[section]:
                raise ConfigError(f"{origin}: unknown key {key!r} in [{section}]")
            parts[section][key] = _parse(section, key, raw, getattr(targets[section], key))
    try:
        model = replace(cfg.model, **parts["model"])
        ranges = replace(cfg.ranges, **parts["ranges"])
        return replace(cfg, model=model, ranges=ranges, **parts["train"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{origin}: {exc}") from None


def loads(text: str, base: TrainConfig | None = None, origin: str = "<string>") -> TrainConfig:
    cp = configparser.ConfigParser(interpolation=None, strict=True)
    cp.optionxform = str  # keys are case-sensitive
    try:
        cp.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError(f"{origin}: {exc}") from None
    values = {s: dict(cp[s]) for s in cp.sections()}
    return apply_overrides(base or TrainConfig(), values, origin)


def load(path, base: TrainConfig | None = None) -> TrainConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return loads(text, base, origin=str(path))


def dumps(cfg: TrainConfig) -> str:
    """Fully resolved config text; ``loads(dumps(c)) == c``."""
    lines = []
    for section, obj in (("train", cfg), ("model", cfg.model), ("ranges", cfg.ranges)):
        lines.append(f"[{section}]")
        lines += [f"{k} = {_format(getattr(obj, k))}" for k in SECTIONS[section]]
        lines.append("")
    return "\n".join(lines)
