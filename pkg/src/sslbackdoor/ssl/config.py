"""Method hyperparameters, augmentation policies and their presets.

Presets come in three scales. ``paper`` mirrors the published ImageNet-100
setups; ``desk`` shrinks memory structures to CIFAR-10 size; ``fast`` halves the
epoch budget of ``desk``.

MoCo v2 temperature and the BYOL/MSF target momentum are not given by the
published setups; the defaults below are those of the original method papers.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

from ..errors import ConfigError

METHODS = ("moco_v2", "byol", "msf", "rotnet", "jigsaw")
EXEMPLAR_METHODS = ("moco_v2", "byol", "msf")
VIEW_MODES = ("standard", "one_view_poisoned", "random_poison_both_views")

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def _from_dict(cls, d: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kwargs = {}
    for f in fields(cls):
        if f.name in d:
            v = d[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
    return cls(**kwargs)


@dataclass(frozen=True)
class AugmentationPolicy:
    output_size: int = 32
    crop_scale_range: tuple[float, float] = (0.2, 1.0)
    crop_ratio_range: tuple[float, float] = (3 / 4, 4 / 3)
    horizontal_flip_prob: float = 0.5
    # brightness, contrast, saturation, hue
    color_jitter: tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    color_jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_prob: float = 0.0
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    mean: tuple[float, float, float] = CIFAR_MEAN
    std: tuple[float, float, float] = CIFAR_STD

    def __post_init__(self):
        for name in ("horizontal_flip_prob", "color_jitter_prob", "grayscale_prob", "blur_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {p}")
        lo, hi = self.crop_scale_range
        if not (0 < lo <= hi <= 1):
            raise ConfigError(f"crop_scale_range must satisfy 0 < min <= max <= 1, got {self.crop_scale_range}")
        if self.output_size <= 0:
            raise ConfigError("output_size must be positive")
        if any(s <= 0 for s in self.std):
            raise ConfigError("normalisation std must be positive")

    @classmethod
    def identity(cls, size: int) -> "AugmentationPolicy":
        """No augmentation and no normalisation: views are the input scaled to [0, 1]."""
        return cls(
            output_size=size,
            crop_scale_range=(1.0, 1.0),
            crop_ratio_range=(1.0, 1.0),
            horizontal_flip_prob=0.0,
            color_jitter_prob=0.0,
            grayscale_prob=0.0,
            blur_prob=0.0,
            mean=(0.0, 0.0, 0.0),
            std=(1.0, 1.0, 1.0),
        )

    @classmethod
    def mocov2(cls, size: int = 32) -> "AugmentationPolicy":
        # blur is part of the 224 px recipe; at CIFAR size it only destroys detail
        small = size < 96
        return cls(
            output_size=size,
            blur_prob=0.0 if small else 0.5,
            mean=CIFAR_MEAN if small else IMAGENET_MEAN,
            std=CIFAR_STD if small else IMAGENET_STD,
        )

    @classmethod
    def light(cls, size: int = 32) -> "AugmentationPolicy":
        """Crop and flip only, for the pretext-task methods."""
        small = size < 96
        return cls(
            output_size=size,
            crop_scale_range=(0.5, 1.0),
            color_jitter_prob=0.0,
            grayscale_prob=0.0,
            mean=CIFAR_MEAN if small else IMAGENET_MEAN,
            std=CIFAR_STD if small else IMAGENET_STD,
        )

    @classmethod
    def for_method(cls, method: str, size: int = 32) -> "AugmentationPolicy":
        return cls.mocov2(size) if method in EXEMPLAR_METHODS else cls.light(size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationPolicy":
        return _from_dict(cls, d)


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"  # sgd | adam
    lr: float = 0.06
    weight_decay: float = 1e-4
    momentum: float = 0.9
    nesterov: bool = False

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "cosine"  # cosine | step
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1

    def __post_init__(self):
        if self.kind not in ("cosine", "step", "constant"):
            raise ConfigError(f"unknown schedule {self.kind!r}")


def lr_at(base_lr: float, schedule: ScheduleConfig, step: int, total_steps: int, steps_per_epoch: int) -> float:
    """Learning rate for a 0-indexed step.

    The cosine schedule reaches exactly zero on the last step.
    """
    if schedule.kind == "cosine":
        if total_steps <= 1:
            return base_lr
        return 0.5 * base_lr * (1 + math.cos(math.pi * step / (total_steps - 1)))
    if schedule.kind == "step":
        epoch = step // max(steps_per_epoch, 1)
        return base_lr * schedule.gamma ** sum(epoch >= m for m in schedule.milestones)
    return base_lr


@dataclass(frozen=True)
class MethodConfig:
    method: str
    embedding_dim: int = 128
    hidden_dim: int = 512
    temperature: float = 0.2
    queue_size: int = 4096
    ema_momentum: float = 0.999
    nn_count: int = 10
    memory_bank_size: int = 16384
    permutation_set_size: int = 100
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    epochs: int = 200
    batch_size: int = 256
    seed: int = 0
    backbone_width: int = 64
    stem: str = "cifar"
    bn_splits: int = 8

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.embedding_dim <= 0:
            raise ConfigError("embedding_dim must be positive")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if not 0.0 <= self.ema_momentum < 1.0 and self.method in EXEMPLAR_METHODS:
            raise ConfigError("ema_momentum must lie in [0, 1)")
        if self.batch_size <= 0 or self.epochs < 0:
            raise ConfigError("batch_size must be positive and epochs non-negative")
        if self.method == "moco_v2" and self.queue_size % self.batch_size:
            raise ConfigError(f"queue size {self.queue_size} is not a multiple of batch size {self.batch_size}")
        if self.method == "msf":
            if self.nn_count > self.memory_bank_size:
                raise ConfigError("nn_count exceeds memory_bank_size")
            if self.memory_bank_size % self.batch_size:
                raise ConfigError("memory bank size must be a multiple of batch size")
        if self.method == "jigsaw" and not 1 <= self.permutation_set_size <= math.factorial(9):
            raise ConfigError("permutation_set_size must lie in [1, 9!]")
        if self.batch_size % max(self.bn_splits, 1):
            raise ConfigError(f"batch size {self.batch_size} not divisible by bn_splits {self.bn_splits}")

    @classmethod
    def preset(cls, method: str, scale: str = "desk", **overrides) -> "MethodConfig":
        if scale not in ("paper", "desk", "fast"):
            raise ConfigError(f"unknown preset scale {scale!r}")
        paper = scale == "paper"
        exemplar_epochs = {"paper": 200, "desk": 200, "fast": 100}[scale]
        pretext_epochs = 53 if scale == "fast" else 105
        pretext_milestones = (15, 30, 45, 50) if scale == "fast" else (30, 60, 90, 100)
        common = dict(stem="imagenet" if paper else "cifar", bn_splits=1 if paper else 8)
        if method == "moco_v2":
            cfg = cls(
                method,
                embedding_dim=128,
                hidden_dim=512,
                temperature=0.2,
                queue_size=65536 if paper else 4096,
                ema_momentum=0.999,
                optimizer=OptimizerConfig("sgd", 0.06, 1e-4, 0.9),
                schedule=ScheduleConfig("cosine"),
                epochs=exemplar_epochs,
                batch_size=256,
                **common,
            )
        elif method == "byol":
            milestones = (150, 175) if exemplar_epochs == 200 else (75, 87)
            cfg = cls(
                method,
                embedding_dim=128,
                hidden_dim=1024,
                ema_momentum=0.99,
                optimizer=OptimizerConfig("adam", 2e-3, 1e-6, 0.0),
                schedule=ScheduleConfig("step", milestones, 0.2),
                epochs=exemplar_epochs,
                batch_size=512 if paper else 256,
                **common,
            )
        elif method == "msf":
            cfg = cls(
                method,
                embedding_dim=128,
                hidden_dim=1024,
                ema_momentum=0.99,
                nn_count=10,
                memory_bank_size=128000 if paper else 16384,
                optimizer=OptimizerConfig("sgd", 0.05, 1e-4, 0.9),
                schedule=ScheduleConfig("cosine"),
                epochs=exemplar_epochs,
                batch_size=256,
                **common,
            )
        elif method == "jigsaw":
            cfg = cls(
                method,
                hidden_dim=1024,
                permutation_set_size=2000 if paper else 100,
                optimizer=OptimizerConfig("sgd", 0.01, 1e-4, 0.9),
                schedule=ScheduleConfig("step", pretext_milestones, 0.1),
                epochs=pretext_epochs,
                batch_size=256,
                **common,
            )
        elif method == "rotnet":
            cfg = cls(
                method,
                optimizer=OptimizerConfig("sgd", 0.05, 1e-4, 0.9),
                schedule=ScheduleConfig("step", pretext_milestones, 0.1),
                epochs=pretext_epochs,
                batch_size=256,
                **common,
            )
        else:
            raise ConfigError(f"unknown method {method!r}")
        return replace(cfg, **overrides) if overrides else cfg

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MethodConfig":
        d = dict(d)
        if "optimizer" in d and isinstance(d["optimizer"], dict):
            d["optimizer"] = _from_dict(OptimizerConfig, d["optimizer"])
        if "schedule" in d and isinstance(d["schedule"], dict):
            d["schedule"] = _from_dict(ScheduleConfig, d["schedule"])
        return _from_dict(cls, d)
