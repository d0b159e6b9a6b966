"""Model and training hyperparameters.

Both records validate themselves on construction and round-trip through plain
dicts so they can be written into checkpoints and run directories as JSON.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .errors import ConfigError

LOSS_NAMES = ("UNET_OUT", "CAE_OUT", "IE2D_OUT", "IMITATION")


def _from_dict(cls, data):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of the U-Net, the autoencoder and the imitating encoder.

    Defaults reproduce the published setup (128 px input, five poolings,
    16 kernels doubling per level, 10x10 kernels). For CPU work a kernel
    size of 3 is far cheaper.
    """

    input_size: int = 128
    depth: int = 5
    base_channels: int = 16
    kernel_size: int = 10
    convs_per_level: int = 2
    output_classes: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("depth", "base_channels", "kernel_size", "convs_per_level", "output_classes"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {value!r}")
        if not isinstance(self.input_size, int) or self.input_size < 1:
            raise ConfigError(f"input_size must be a positive integer, got {self.input_size!r}")
        if self.input_size % (2 ** self.depth):
            raise ConfigError(
                f"input_size {self.input_size} is not divisible by 2**depth = {2 ** self.depth}"
            )

    def channels(self, level):
        """Kernel count used by every convolution on resolution ``level``."""
        return self.base_channels * 2 ** level

    @property
    def latent_size(self):
        return self.input_size // 2 ** self.depth

    @property
    def latent_channels(self):
        # bottleneck reuses the deepest level's channel count
        return self.channels(self.depth - 1)

    @property
    def latent_dim(self):
        return self.latent_size ** 2 * self.latent_channels

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        return _from_dict(cls, data)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs: int = 50
    step_order: tuple = LOSS_NAMES
    aug_rotation_deg: float = 15.0
    aug_translate_frac: float = 0.1
    seed: int = 0
    loss_kind: str = "dice"
    # "batch": all four sub-steps on every batch; "epoch": one loss per pass over the data
    alternation: str = "batch"
    imitation_squared: bool = False
    imitation_normalize: bool = False

    def __post_init__(self):
        object.__setattr__(self, "step_order", tuple(self.step_order))
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate!r}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError(f"batch_size must be an integer >= 1, got {self.batch_size!r}")
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigError(f"epochs must be an integer >= 1, got {self.epochs!r}")
        if sorted(self.step_order) != sorted(LOSS_NAMES):
            raise ConfigError(
                f"step_order must contain each of {LOSS_NAMES} exactly once, got {self.step_order}"
            )
        if self.aug_rotation_deg < 0 or self.aug_translate_frac < 0:
            raise ConfigError("augmentation magnitudes must be non-negative")
        if self.loss_kind not in ("dice", "cross-entropy"):
            raise ConfigError(f"loss_kind must be 'dice' or 'cross-entropy', got {self.loss_kind!r}")
        if self.alternation not in ("batch", "epoch"):
            raise ConfigError(f"alternation must be 'batch' or 'epoch', got {self.alternation!r}")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["step_order"] = list(self.step_order)
        return d

    @classmethod
    def from_dict(cls, data):
        return _from_dict(cls, data)
