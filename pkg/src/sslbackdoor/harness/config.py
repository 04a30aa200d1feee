"""Experiment configuration: one declarative JSON document per run."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..distill import DistillConfig
from ..errors import ConfigError
from ..poison import MODES
from ..probe import ProbeConfig
from ..ssl.config import VIEW_MODES, MethodConfig
from ..trigger import DEFAULT_TRIGGER_SEED, TriggerSpec, default_patch_size

CONFIG_SCHEMA_VERSION = 1

# name -> (image size, method scale, note on expected cost)
PRESETS = {
    "cifar10": (32, "desk", "CIFAR-10 train/test as train/val; 200 epochs is about 2-4 h per training on one GPU"),
    "stl10": (96, "desk", "STL-10 unlabeled+train folded into train/, test as val/; roughly 9x the CIFAR-10 cost"),
    "imagenet-subset": (224, "paper", "user-provided class folders; paper-scale settings, days per training"),
}

OUT_ROOT_ENV = "SSLBACKDOOR_OUT"


@dataclass(frozen=True)
class Seeds:
    poison: int = 0
    val_patch: int = 0
    train: int = 0
    probe: int = 0
    distill: int = 0


@dataclass(frozen=True)
class PoisonSpec:
    """Poisoning for one run. ``rate`` is the fraction of the whole training set.

    ``targeted`` derives the within-class fraction from ``rate``; ``superclass``
    uses ``within_class_fraction`` for each listed class. ``random_rate`` adds
    class-agnostic poisons on top of a targeted recipe.
    """

    mode: str = "none"  # none | targeted | untargeted | superclass
    target_classes: tuple[str, ...] = ()
    rate: float = 0.0
    within_class_fraction: float | None = None
    random_rate: float = 0.0

    def __post_init__(self):
        if self.mode != "none" and self.mode not in MODES:
            raise ConfigError(f"unknown poison mode {self.mode!r}")
        if not 0.0 <= self.rate <= 1.0 or not 0.0 <= self.random_rate <= 1.0:
            raise ConfigError("poison rates must lie in [0, 1]")
        if self.mode == "targeted" and len(self.target_classes) != 1:
            raise ConfigError("targeted poisoning needs exactly one target class")
        if self.mode == "superclass" and (not self.target_classes or self.within_class_fraction is None):
            raise ConfigError("superclass poisoning needs target classes and a within-class fraction")
        if self.mode in ("none", "untargeted") and self.target_classes:
            raise ConfigError(f"{self.mode} poisoning takes no target classes")

    @property
    def is_clean(self) -> bool:
        if self.random_rate > 0:
            return False
        if self.mode == "superclass":
            return self.within_class_fraction == 0
        return self.mode == "none" or self.rate == 0

    @property
    def target(self) -> str | None:
        return self.target_classes[0] if len(self.target_classes) == 1 else None


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str
    data_root: str
    method: MethodConfig
    trigger: TriggerSpec
    poison: PoisonSpec = field(default_factory=PoisonSpec)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    distill: DistillConfig | None = None
    view_mode: str = "standard"
    seeds: Seeds = field(default_factory=Seeds)
    image_size: int = 32
    out_root: str = "runs"
    name: str = "experiment"
    schema_version: int = CONFIG_SCHEMA_VERSION

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown dataset preset {self.preset!r}; expected one of {sorted(PRESETS)}")
        if self.view_mode not in VIEW_MODES:
            raise ConfigError(f"unknown view mode {self.view_mode!r}")
        if self.schema_version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema version {self.schema_version}")
        # the per-stage seeds are authoritative; the component configs mirror them
        object.__setattr__(self, "method", replace(self.method, seed=self.seeds.train))
        object.__setattr__(self, "probe", replace(self.probe, seed=self.seeds.probe))
        if self.distill is not None:
            object.__setattr__(self, "distill", replace(self.distill, seed=self.seeds.distill))

    @classmethod
    def preset_config(
        cls,
        preset: str,
        data_root: str,
        method: str = "moco_v2",
        target_class: str | None = None,
        rate: float = 0.01,
        mode: str = "targeted",
        trigger_id: int = 10,
        scale: str | None = None,
        **overrides,
    ) -> "ExperimentConfig":
        if preset not in PRESETS:
            raise ConfigError(f"unknown dataset preset {preset!r}")
        size, default_scale, _ = PRESETS[preset]
        mcfg = MethodConfig.preset(method, scale or default_scale)
        if mode == "targeted":
            if target_class is None:
                raise ConfigError("a targeted preset needs target_class")
            poison = PoisonSpec("targeted", (target_class,), rate)
        elif mode == "untargeted":
            poison = PoisonSpec("untargeted", (), rate)
        elif mode == "none":
            poison = PoisonSpec()
        else:
            raise ConfigError("presets cover targeted, untargeted and none; write superclass configs by hand")
        trigger = TriggerSpec(trigger_id, default_patch_size(size, size), DEFAULT_TRIGGER_SEED)
        cfg = cls(
            preset=preset,
            data_root=str(data_root),
            method=mcfg,
            trigger=trigger,
            poison=poison,
            probe=ProbeConfig.for_method(method),
            image_size=size,
            out_root=os.environ.get(OUT_ROOT_ENV, "runs"),
        )
        return replace(cfg, **overrides) if overrides else cfg

    def clean_counterpart(self) -> "ExperimentConfig":
        """Same pipeline without poison. Poison seed and view mode are reset so
        that every poisoned variant shares one clean baseline."""
        return replace(
            self,
            poison=PoisonSpec(),
            view_mode="standard",
            seeds=replace(self.seeds, poison=0),
            distill=None,
            name=f"{self.name}-clean",
        )

    @property
    def is_clean(self) -> bool:
        return self.poison.is_clean

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trigger"] = {
            "trigger_id": self.trigger.trigger_id,
            "patch_size": self.trigger.patch_size,
            "seed": self.trigger.seed,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown experiment config fields: {sorted(unknown)}")
        try:
            d["method"] = MethodConfig.from_dict(d["method"])
            d["trigger"] = TriggerSpec(**d["trigger"])
            p = dict(d.get("poison") or {})
            p["target_classes"] = tuple(p.get("target_classes", ()))
            d["poison"] = PoisonSpec(**p)
            d["probe"] = ProbeConfig.from_dict(d.get("probe") or {})
            if d.get("distill") is not None:
                d["distill"] = DistillConfig.from_dict(d["distill"])
            d["seeds"] = Seeds(**(d.get("seeds") or {}))
            return cls(**d)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed experiment config: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(text)

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    def config_hash(self) -> str:
        """Identity of the attack computation.

        Output location and display name are excluded, and so is the distillation
        block: defence runs live in their own stage directory of the same run.
        """
        d = self.to_dict()
        for key in ("out_root", "name", "distill"):
            d.pop(key)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def run_dir(self) -> Path:
        return Path(self.out_root) / self.config_hash()
