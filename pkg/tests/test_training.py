import importlib
import json
import warnings
from dataclasses import replace

import numpy as np
import pytest
import torch
from conftest import tiny_method
from scipy.stats import binomtest

from sslbackdoor.errors import ConfigError, DataError, ProvenanceError, ProvenanceWarning, TrainingDivergence
from sslbackdoor.poison import PoisonRecipe, materialize, poison_targeted
from sslbackdoor.seeding import derive_torch_generator
from sslbackdoor.ssl import AugmentationPolicy, EncoderCheckpoint, MethodConfig, initial_model, train
from sslbackdoor.ssl.augment import augment_pair, augment_view, to_tensor
from sslbackdoor.ssl.data import ViewDataset, entry_view_mode
from sslbackdoor.ssl.train import read_train_log
from sslbackdoor.trigger import PlacementRecord, TriggerSpec, patch_overlaps

TRIG = TriggerSpec(10, 7)
# the package re-exports the train() function under the module's name
train_module = importlib.import_module("sslbackdoor.ssl.train")


def cfg(method="moco_v2", **kw):
    return tiny_method(MethodConfig.preset(method, "desk"), **kw)


@pytest.fixture(scope="module")
def poisoned_train(tmp_path_factory, toy_train):
    m = poison_targeted(toy_train, PoisonRecipe.targeted(toy_train, "class_1", 0.0625, TRIG, 0))
    return materialize(m, tmp_path_factory.mktemp("mat"))


# --- augmentation ---------------------------------------------------------------------------


def test_identity_policy_returns_input():
    img = np.random.default_rng(0).integers(0, 256, (32, 32, 3), dtype=np.uint8)
    v1, v2 = augment_pair(img, AugmentationPolicy.identity(32), torch.Generator().manual_seed(0))
    assert torch.equal(v1, to_tensor(img)) and torch.equal(v2, to_tensor(img))


def test_one_view_poison_branch_is_fair_coin():
    img = np.zeros((16, 16, 3), np.uint8)
    twin = np.full((16, 16, 3), 255, np.uint8)
    pol = AugmentationPolicy.identity(16)
    n, first = 2000, 0
    for i in range(n):
        records = []
        augment_pair(img, pol, derive_torch_generator(1, "coin", i), "one_view_poisoned", twin, records)
        assert records[0].poisoned_source != records[1].poisoned_source
        first += records[0].poisoned_source
    assert binomtest(first, n, 0.5).pvalue > 0.01


def test_one_view_requires_twin():
    with pytest.raises(DataError):
        augment_pair(np.zeros((8, 8, 3), np.uint8), AugmentationPolicy.identity(8), torch.Generator(), "one_view_poisoned")


def test_trigger_visible_iff_crop_hits_patch():
    pol = replace(AugmentationPolicy.identity(32), crop_scale_range=(0.02, 0.3), crop_ratio_range=(0.5, 2.0))
    p = 7
    for i in range(400):
        rng = np.random.default_rng(i)
        x, y = (int(v) for v in rng.integers(0, 32 - p + 1, 2))
        img = np.zeros((32, 32, 3), np.uint8)
        img[y:y + p, x:x + p] = 255
        view, rec = augment_view(to_tensor(img), pol, derive_torch_generator(0, "crop", i))
        hit = patch_overlaps(PlacementRecord("i", x, y), p, rec.crop_box)
        assert (view.max().item() > 0) == hit, (i, rec.crop_box, (x, y))


def test_entry_view_modes():
    assert entry_view_mode("standard", True, "target") == "standard"
    assert entry_view_mode("one_view_poisoned", False, None) == "standard"
    assert entry_view_mode("one_view_poisoned", True, "target") == "one_view_poisoned"
    assert entry_view_mode("random_poison_both_views", True, "random") == "standard"
    assert entry_view_mode("random_poison_both_views", True, "target") == "one_view_poisoned"


def test_dataset_is_label_free(toy_train):
    with pytest.raises(TypeError):
        ViewDataset(toy_train, AugmentationPolicy.mocov2(32), 0)


def test_dataset_refuses_unmaterialised(toy_train):
    m = poison_targeted(toy_train, PoisonRecipe.targeted(toy_train, 0, 0.0625, TRIG, 0))
    with pytest.raises(DataError):
        ViewDataset(m.unlabeled(), AugmentationPolicy.mocov2(32), 0)
    with pytest.raises(DataError):
        train(cfg(), m)


def test_dataset_items_are_reproducible(poisoned_train):
    ds = ViewDataset(poisoned_train.unlabeled(), AugmentationPolicy.mocov2(32), 3, "one_view_poisoned")
    a, b = ds[5], ds[5]
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    ds.set_epoch(1)
    assert not torch.equal(ds[5][0], a[0])


# --- training --------------------------------------------------------------------------------


@pytest.mark.parametrize("method", ["moco_v2", "byol", "msf", "rotnet", "jigsaw"])
def test_zero_epochs_is_initialisation(method, toy_train):
    c = cfg(method, epochs=0)
    ckpt = train(c, toy_train)
    init = initial_model(c).state_dict()
    assert ckpt.state_dict.keys() == init.keys()
    assert all(torch.equal(ckpt.state_dict[k], init[k]) for k in init)


@pytest.mark.parametrize("method", ["moco_v2", "byol", "msf", "rotnet", "jigsaw"])
def test_bitwise_reproducible(method, tmp_path, toy_train):
    a = train(cfg(method), toy_train, out_dir=tmp_path / "a")
    b = train(cfg(method), toy_train, out_dir=tmp_path / "b")
    assert read_train_log(tmp_path / "a" / "train_log.jsonl") == read_train_log(tmp_path / "b" / "train_log.jsonl")
    assert a.content_hash() == b.content_hash()


def test_labels_do_not_reach_training(toy_train):
    scrambled = toy_train.with_labels(np.random.default_rng(0).permutation([e.label for e in toy_train]))
    assert train(cfg("byol"), toy_train).content_hash() == train(cfg("byol"), scrambled).content_hash()


def test_workers_do_not_change_result(toy_train):
    assert train(cfg("msf"), toy_train).content_hash() == train(cfg("msf"), toy_train, workers=1).content_hash()


@pytest.mark.parametrize("method,epochs,skip", [
    ("moco_v2", 12, 16), ("byol", 6, 0), ("msf", 6, 0), ("rotnet", 6, 0), ("jigsaw", 6, 0),
])
def test_loss_trend_decreasing(method, epochs, skip, tmp_path, toy_train):
    # MoCo first climbs while real keys replace the random initial queue
    train(cfg(method, epochs=epochs), toy_train, out_dir=tmp_path)
    loss = np.array([r["loss"] for r in read_train_log(tmp_path / "train_log.jsonl")])[skip:]
    smooth = np.convolve(loss, np.ones(8) / 8, "valid")
    assert np.polyfit(np.arange(len(smooth)), smooth, 1)[0] < 0


def test_resume_matches_uninterrupted(tmp_path, toy_train, monkeypatch):
    c = cfg("jigsaw", epochs=2)
    full = train(c, toy_train, out_dir=tmp_path / "full")
    steps_per_epoch = len(toy_train) // c.batch_size
    real_step = train_module.train_step

    def crash(model, opt, views, ctx):
        if ctx["step"] == steps_per_epoch:
            raise KeyboardInterrupt
        return real_step(model, opt, views, ctx)

    monkeypatch.setattr(train_module, "train_step", crash)
    with pytest.raises(KeyboardInterrupt):
        train(c, toy_train, out_dir=tmp_path / "cut")
    monkeypatch.setattr(train_module, "train_step", real_step)
    resumed = train(c, toy_train, out_dir=tmp_path / "cut", resume=True)
    assert resumed.content_hash() == full.content_hash()
    assert read_train_log(tmp_path / "cut" / "train_log.jsonl") == read_train_log(tmp_path / "full" / "train_log.jsonl")
    with pytest.raises(ProvenanceError):
        train(replace(c, seed=1), toy_train, out_dir=tmp_path / "cut", resume=True)


def test_divergence_is_reported(toy_train):
    c = cfg("rotnet")
    c = replace(c, optimizer=replace(c.optimizer, lr=1e30))
    with pytest.raises(TrainingDivergence, match="step"):
        train(replace(c, epochs=3), toy_train)


def test_batch_larger_than_dataset(toy_train):
    with pytest.raises(ConfigError):
        train(cfg(batch_size=256), toy_train)


def test_checkpoint_round_trip_and_provenance(tmp_path, toy_train, poisoned_train):
    ckpt = train(cfg("byol"), poisoned_train, out_dir=tmp_path)
    loaded = EncoderCheckpoint.load(tmp_path / "checkpoint.pt")
    assert loaded.content_hash() == ckpt.content_hash()
    assert ckpt.check_provenance(poisoned_train)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        assert not ckpt.check_provenance(toy_train)
    assert any(issubclass(w.category, ProvenanceWarning) for w in caught)
    with pytest.raises(ProvenanceError):
        ckpt.check_provenance(toy_train, strict=True)


def test_crop_log(tmp_path, poisoned_train):
    train(cfg(), poisoned_train, view_mode="one_view_poisoned", out_dir=tmp_path, log_crops=True)
    rows = [json.loads(line) for line in open(tmp_path / "crops.jsonl")]
    poisoned = poisoned_train.poisoned_ids
    by_image = {}
    for r in rows:
        by_image.setdefault((r["step"], r["image_id"]), []).append(r["poisoned_source"])
    for (_, image_id), flags in by_image.items():
        assert len(flags) == 2
        assert sorted(flags) == ([False, True] if image_id in poisoned else [True, True])


def test_device_resolution(monkeypatch):
    from sslbackdoor.seeding import DEVICE_ENV, resolve_device
    monkeypatch.delenv(DEVICE_ENV, raising=False)
    assert resolve_device().type == "cpu"
    monkeypatch.setenv(DEVICE_ENV, "meta")
    assert resolve_device().type == "meta" and resolve_device("cpu").type == "cpu"
