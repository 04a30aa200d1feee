from dataclasses import replace

import pytest

from sslbackdoor.distill import DistillConfig
from sslbackdoor.harness import ExperimentConfig
from sslbackdoor.manifest import DatasetManifest, ManifestEntry, build_manifest
from sslbackdoor.toydata import write_toy_dataset


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    """4 classes x 32 train / 8 val images at 32 px."""
    return write_toy_dataset(tmp_path_factory.mktemp("toy") / "data", n_classes=4, n_train=32, n_val=8)


@pytest.fixture(scope="session")
def toy_train(toy_root):
    return build_manifest(toy_root, "train")


@pytest.fixture(scope="session")
def toy_val(toy_root):
    return build_manifest(toy_root, "val")


def tiny_method(cfg, **kw):
    """Shrink a preset method config to something that trains in seconds on one CPU."""
    small = dict(epochs=1, batch_size=16, queue_size=64, memory_bank_size=64, nn_count=4,
                 bn_splits=2, backbone_width=8, hidden_dim=32, permutation_set_size=10)
    small.update(kw)
    return replace(cfg, **small)


def tiny_config(data_root, out_root, method="moco_v2", rate=0.0625, distill=False, **kw):
    cfg = ExperimentConfig.preset_config("cifar10", str(data_root), method=method,
                                         target_class="class_1", rate=rate)
    cfg = replace(
        cfg,
        method=tiny_method(cfg.method),
        probe=replace(cfg.probe, label_fraction=0.5, epochs=3),
        out_root=str(out_root),
        distill=DistillConfig(clean_fraction=0.5, anchor_count=16, epochs=1, batch_size=16, hidden_dim=32)
        if distill else None,
    )
    return replace(cfg, **kw) if kw else cfg


def fake_manifest(n_classes, per_class, split="train", size=32):
    """A manifest that is never read from disk; poisoning only needs metadata."""
    counts = per_class if isinstance(per_class, (list, tuple)) else [per_class] * n_classes
    entries = tuple(
        ManifestEntry(f"{split}_{c}_{i}", f"{split}/c{c}/{i}.png", c, split, size, size)
        for c in range(n_classes) for i in range(counts[c])
    )
    return DatasetManifest("fake", split, tuple(f"c{c}" for c in range(n_classes)), entries, "/nonexistent")
