"""Configuration dataclasses and the dotted-key config file format.

A config file is plain ``key = value`` lines (``#`` comments allowed).  Every
field of every section is addressable by a dotted key such as
``train.lr_initial`` or ``train.loss_weights.alpha``; the same keys are used
for ``--set`` overrides and for the resolved-config dump written into a run
directory, so a dump reloads as a config file.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import types
import typing
from dataclasses import dataclass, field

from .errors import ConfigurationError


class Ablation(enum.Enum):
    FULL = "FULL"                      # contour + residual shape branches
    A_FULL_CONTOUR = "A_FULL_CONTOUR"  # contour target never modified
    C_NO_CONTOUR = "C_NO_CONTOUR"      # contour branch removed
    S_NO_SHAPE = "S_NO_SHAPE"          # shape branch removed
    R_NO_RESIDUAL = "R_NO_RESIDUAL"    # shape transitions stacked, no subtraction


@dataclass
class NetworkConfig:
    """Architecture hyperparameters.

    ``growth_k`` is the feature count each 1x1x1 projection inside a dense
    block produces; ``group_n`` is the number of features per group in the
    separable convolutions; ``levels`` counts down-transitions.
    """

    growth_k: int = 16
    group_n: int = 4
    levels: int = 3
    base_channels: int = 16
    ablation: Ablation = Ablation.FULL
    input_shape: tuple[int, int, int] = (128, 128, 64)
    transition_width: int = 16   # internal width of the deep transition layers
    out_growth: int = 16         # dense growth inside the out-transitions
    fuse_channels: int = 16      # output width of the first out-transition
    bn_momentum: float = 0.1     # running-statistics update rate of every BN

    def validate(self):
        if self.growth_k < 1 or self.levels < 1 or self.group_n < 1:
            raise ConfigurationError("growth_k, group_n and levels must be >= 1")
        if self.base_channels < 1:
            raise ConfigurationError("base_channels must be >= 1")
        # every dense-block stage input must split into groups of group_n
        if self.base_channels % self.group_n or self.growth_k % self.group_n:
            raise ConfigurationError(
                f"group_n={self.group_n} must divide base_channels="
                f"{self.base_channels} and growth_k={self.growth_k}")
        scale = 2 ** self.levels
        if any(d < scale or d % scale for d in self.input_shape):
            raise ConfigurationError(
                f"input_shape {self.input_shape} must be divisible by 2^levels={scale}")


@dataclass
class LossWeights:
    """Weights of the composite loss; ``gamma`` scales the L2 penalty."""

    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.1
    # fixed (background, foreground) cross-entropy weights; None derives them
    # per batch from the inverse class frequency, clamped to [0.1, 10]
    class_weights: tuple[float, float] | None = None


@dataclass
class PSchedule:
    """Schedule of the contour-erasure threshold p."""

    p_initial: float = 1.0
    hold_epochs: int = 100
    decay_factor: float = 0.9
    decay_every: int = 10
    p_min: float = 0.5

    def validate(self):
        if not (0.0 < self.p_min <= self.p_initial <= 1.0):
            raise ConfigurationError("need 0 < p_min <= p_initial <= 1")
        if not (0.0 < self.decay_factor < 1.0):
            raise ConfigurationError("decay_factor must be in (0, 1)")
        if self.hold_epochs < 0 or self.decay_every < 1:
            raise ConfigurationError("hold_epochs >= 0 and decay_every >= 1 required")


@dataclass
class PreprocessSpec:
    """Intensity windowing and resampling applied before the network."""

    target_shape: tuple[int, int, int] = (128, 128, 64)
    window_level: float = 10.0
    window_width: float = 700.0

    @property
    def clip_lo(self):
        return self.window_level - self.window_width / 2.0

    @property
    def clip_hi(self):
        return self.window_level + self.window_width / 2.0


@dataclass
class AugmentSpec:
    """On-the-fly training augmentation parameters."""

    affine_prob: float = 0.8
    cutout_prob: float = 0.8
    cutout_frac_min: float = 0.2    # 1/5 of the image length per dimension
    cutout_frac_max: float = 0.25   # 1/4
    rotate_deg: float = 10.0
    scale_min: float = 0.9
    scale_max: float = 1.1
    translate_frac: float = 0.05

    def validate(self):
        if not (0.0 <= self.affine_prob <= 1.0 and 0.0 <= self.cutout_prob <= 1.0):
            raise ConfigurationError("augmentation probabilities must be in [0, 1]")
        if not (0.0 < self.cutout_frac_min <= self.cutout_frac_max < 1.0):
            raise ConfigurationError("need 0 < cutout_frac_min <= cutout_frac_max < 1")


@dataclass
class PhantomSpec:
    """Synthetic blob volumes used for desk-scale verification."""

    shape: tuple[int, int, int] = (64, 64, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    fg_hu: float = 120.0
    bg_hu: float = -60.0
    distractor_hu: float = 60.0
    noise_sigma: float = 12.0
    min_volume_frac: float = 0.05
    max_volume_frac: float = 0.30


@dataclass
class DataConfig:
    """Dataset wiring: manifest location and split sizes."""

    manifest: str = ""
    fold_count: int = 8
    val_count: int = 4      # holdout size for plain `train`
    train_count: int = 0    # >0 switches cross-validation to the inverted split


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 4
    lr_initial: float = 0.001
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 50
    loss_weights: LossWeights = field(default_factory=LossWeights)
    p_schedule: PSchedule = field(default_factory=PSchedule)
    seed: int = 0
    device: str = "cpu"

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.lr_initial <= 0 or self.lr_decay_every < 1:
            raise ConfigurationError("lr_initial > 0 and lr_decay_every >= 1 required")
        self.p_schedule.validate()


@dataclass
class ExperimentConfig:
    """Everything one run needs, grouped into dotted-key sections."""

    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    preprocess: PreprocessSpec = field(default_factory=PreprocessSpec)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self):
        self.network.validate()
        self.train.validate()
        self.augment.validate()

    # -- dotted-key plumbing -------------------------------------------------

    def set_key(self, dotted, raw):
        """Assign one ``section.field[.subfield] = value`` override."""
        parts = dotted.split(".")
        obj = self
        for part in parts[:-1]:
            if not dataclasses.is_dataclass(obj) or part not in _field_map(obj):
                raise ConfigurationError(f"unknown config key: {dotted!r}")
            obj = getattr(obj, part)
        leaf = parts[-1]
        if not dataclasses.is_dataclass(obj) or leaf not in _field_map(obj):
            raise ConfigurationError(f"unknown config key: {dotted!r}")
        hint = typing.get_type_hints(type(obj))[leaf]
        setattr(obj, leaf, _parse_value(raw, hint, dotted))

    def apply_overrides(self, overrides):
        for item in overrides:
            if "=" not in item:
                raise ConfigurationError(f"override {item!r} is not key=value")
            key, _, value = item.partition("=")
            self.set_key(key.strip(), value.strip())

    def to_lines(self):
        lines = []
        for key, value in _flatten("", self):
            lines.append(f"{key} = {_format_value(value)}")
        return lines

    def dump(self, path):
        with open(path, "w") as fh:
            fh.write("\n".join(self.to_lines()) + "\n")

    def config_hash(self):
        """Stable digest of the resolved configuration."""
        text = "\n".join(self.to_lines())
        return hashlib.sha256(text.encode()).hexdigest()

    @classmethod
    def from_lines(cls, lines, source="<config>"):
        cfg = cls()
        for lineno, line in enumerate(lines, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{source}:{lineno}: expected key = value")
            key, _, value = line.partition("=")
            cfg.set_key(key.strip(), value.strip())
        return cfg

    @classmethod
    def from_file(cls, path, overrides=()):
        with open(path) as fh:
            cfg = cls.from_lines(fh, source=str(path))
        cfg.apply_overrides(overrides)
        return cfg


def _field_map(obj):
    return {f.name: f for f in dataclasses.fields(obj)}


def _parse_value(raw, hint, dotted):
    origin = typing.get_origin(hint)
    if origin is typing.Union or isinstance(hint, types.UnionType):  # Optional[...]
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        return _parse_value(raw, args[0], dotted)
    try:
        if hint is bool:
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
        if isinstance(hint, type) and issubclass(hint, enum.Enum):
            return hint[raw.upper()]
        if origin is tuple:
            elem = typing.get_args(hint)[0]
            parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
            return tuple(elem(p.strip()) for p in parts)
    except (ValueError, KeyError) as exc:
        raise ConfigurationError(f"bad value {raw!r} for config key {dotted!r}") from exc
    raise ConfigurationError(f"unsupported config key type for {dotted!r}")


def _format_value(value):
    if value is None:
        return "none"
    if isinstance(value, enum.Enum):
        return value.name
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _flatten(prefix, obj):
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            yield from _flatten(key + ".", value)
        else:
            yield key, value
