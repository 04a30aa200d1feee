"""Shared setup for the demos: a synthetic dataset and shrunken configs."""
from dataclasses import replace
from pathlib import Path

from sslbackdoor.harness import ExperimentConfig
from sslbackdoor.toydata import write_toy_dataset

OUT = Path(__file__).resolve().parent / "out"


def toy_root(n_classes: int = 4, n_train: int = 64, n_val: int = 16) -> Path:
    root = OUT / f"toy_{n_classes}x{n_train}"
    if not (root / "train").exists():
        write_toy_dataset(root, n_classes=n_classes, n_train=n_train, n_val=n_val, seed=0)
    return root


def toy_config(method: str = "moco_v2", rate: float = 0.05, epochs: int = 8, **overrides) -> ExperimentConfig:
    """A cifar10-preset experiment shrunk to run on one CPU in about a minute."""
    cfg = ExperimentConfig.preset_config("cifar10", str(toy_root()), method=method,
                                         target_class="class_1", rate=rate)
    small = dict(epochs=epochs, batch_size=32, queue_size=128, memory_bank_size=128, nn_count=4,
                 bn_splits=2, backbone_width=16, hidden_dim=64, permutation_set_size=10)
    cfg = replace(cfg, method=replace(cfg.method, **small),
                  probe=replace(cfg.probe, label_fraction=0.5, epochs=20),
                  out_root=str(OUT / "runs"), name=f"toy-{method}")
    return replace(cfg, **overrides) if overrides else cfg
