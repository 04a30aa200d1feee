import filecmp
import hashlib

import numpy as np
import pytest
from conftest import fake_manifest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image
from scipy.stats import chisquare

from sslbackdoor.errors import ConfigError, DataError, RateError
from sslbackdoor.images import read_rgb
from sslbackdoor.manifest import DatasetManifest, build_manifest
from sslbackdoor.poison import (
    PoisonRecipe,
    apply_recipe,
    build_patched_valset,
    materialize,
    poison_superclass,
    poison_targeted,
    poison_untargeted,
    strip_poison,
)
from sslbackdoor.probe import select_labeled_subset
from sslbackdoor.trigger import TriggerSpec, generate_trigger

TRIG = TriggerSpec(10, 7)


# --- manifests ----------------------------------------------------------------


def test_scan_counts(tmp_path):
    for c in ("a", "b"):
        (tmp_path / "train" / c).mkdir(parents=True)
        for i in range(3):
            Image.new("RGB", (8, 8)).save(tmp_path / "train" / c / f"{c}{i}.png")
    (tmp_path / "train" / "a" / "notes.txt").write_text("x")
    m = build_manifest(tmp_path, "train")
    assert len(m) == 6 and m.n_poisoned == 0 and m.classes == ("a", "b")
    assert build_manifest(tmp_path, "train").to_json() == m.to_json()


def test_toy_counts_match_filesystem(toy_root, toy_train, toy_val):
    assert len(toy_train) == len(list((toy_root / "train").glob("*/*.png"))) == 128
    assert toy_val.class_counts() == [8, 8, 8, 8]


def test_manifest_save_load(tmp_path, toy_train):
    p = toy_train.save(tmp_path / "m.json")
    assert DatasetManifest.load(p) == toy_train
    p.write_text(p.read_text().replace('"width": 32', '"width": 33', 1))
    with pytest.raises(DataError):
        DatasetManifest.load(p)


def test_training_hash_ignores_labels(toy_train):
    scrambled = toy_train.with_labels([0] * len(toy_train))
    assert scrambled.training_hash() == toy_train.training_hash()
    assert scrambled.content_hash() != toy_train.content_hash()


# --- recipes --------------------------------------------------------------------


def test_cifar_scale_targeted_count():
    m = fake_manifest(10, 5000)
    out = poison_targeted(m, PoisonRecipe.targeted(m, "c3", 0.01, TRIG, 0))
    assert out.n_poisoned == 500
    assert {e.label for e in out if e.is_poisoned} == {3}


def test_imagenet_scale_fraction_half():
    m = fake_manifest(100, 1300)
    r = PoisonRecipe.superclass(m, ["c7"], 0.5, TRIG, 0)
    out = poison_superclass(m, r)
    assert out.n_poisoned == 650
    assert abs(out.n_poisoned / len(m) - 0.005) < 1e-12


def test_zero_fraction_is_identity():
    m = fake_manifest(3, 20)
    out = poison_targeted(m, PoisonRecipe.targeted(m, 1, 0.0, TRIG, 0))
    assert out.entries == m.entries
    assert poison_untargeted(m, 0.0, TRIG, 0).entries == m.entries


def test_targeted_rate_too_high():
    m = fake_manifest(10, 10)
    with pytest.raises(RateError):
        PoisonRecipe.targeted(m, 0, 0.2, TRIG, 0)


def test_superclass_counts():
    m = fake_manifest(2, 100)
    out = poison_superclass(m, PoisonRecipe.superclass(m, [0, 1], 0.25, TRIG, 0))
    assert out.n_poisoned == 50
    assert [sum(e.is_poisoned for e in out.by_class(c)) for c in (0, 1)] == [25, 25]


def test_superclass_of_one_equals_targeted():
    m = fake_manifest(5, 40)
    t = PoisonRecipe.targeted(m, 2, 0.04, TRIG, 9)
    s = PoisonRecipe.superclass(m, [2], t.within_class_fraction, TRIG, 9)
    assert poison_targeted(m, t).entries == poison_superclass(m, s).entries


def test_superclass_rejects_duplicates():
    m = fake_manifest(3, 10)
    with pytest.raises(ConfigError):
        PoisonRecipe.superclass(m, [1, "c1"], 0.5, TRIG, 0)


def test_untargeted_counts_and_uniformity():
    m = fake_manifest(10, 5000)
    out = poison_untargeted(m, 0.05, TRIG, 3)
    assert out.n_poisoned == 2500
    hist = np.bincount([e.label for e in out if e.is_poisoned], minlength=10)
    assert chisquare(hist).pvalue > 0.01


def test_poisoning_is_deterministic_and_order_free():
    m = fake_manifest(4, 30)
    r = PoisonRecipe.targeted(m, 1, 0.1, TRIG, 5)
    a, b = apply_recipe(m, r), apply_recipe(m, r)
    assert a == b
    shuffled = DatasetManifest(m.dataset_name, m.split, m.classes, m.entries[::-1], m.root)
    assert apply_recipe(shuffled, r).poisoned_ids == a.poisoned_ids


def test_recipes_compose():
    m = fake_manifest(4, 50)
    a = poison_targeted(m, PoisonRecipe.targeted(m, 0, 0.05, TRIG, 1))
    b = poison_untargeted(a, 0.05, TRIG, 2)
    assert b.n_poisoned == 20
    assert [r["count"] for r in b.poison] == [10, 10]
    assert {e.poison_group for e in b if e.is_poisoned} == {"target", "random"}


@settings(max_examples=40, deadline=None)
@given(
    mode=st.sampled_from(["targeted", "untargeted", "superclass"]),
    n_classes=st.integers(2, 12),
    per_class=st.lists(st.integers(5, 80), min_size=12, max_size=12),
    rate=st.floats(0, 0.05),
    frac=st.floats(0, 1),
    seed=st.integers(0, 2**31),
    data=st.data(),
)
def test_poison_accounting_property(mode, n_classes, per_class, rate, frac, seed, data):
    m = fake_manifest(n_classes, per_class[:n_classes])
    counts = m.class_counts()
    if mode == "targeted":
        t = data.draw(st.integers(0, n_classes - 1))
        want = round(rate * len(m))
        if want > counts[t]:
            with pytest.raises(RateError):
                PoisonRecipe.targeted(m, t, rate, TRIG, seed)
            return
        out = apply_recipe(m, PoisonRecipe.targeted(m, t, rate, TRIG, seed))
        assert out.n_poisoned == want
        assert all(e.label == t for e in out if e.is_poisoned)
    elif mode == "untargeted":
        out = apply_recipe(m, PoisonRecipe.untargeted(rate, TRIG, seed))
        assert out.n_poisoned == round(rate * len(m))
    else:
        targets = data.draw(st.lists(st.integers(0, n_classes - 1), min_size=1, max_size=n_classes, unique=True))
        out = apply_recipe(m, PoisonRecipe.superclass(m, targets, frac, TRIG, seed))
        assert out.n_poisoned == sum(round(frac * counts[c]) for c in targets)
        assert all(e.label in targets for e in out if e.is_poisoned)
    for e in out:
        if e.is_poisoned:
            e.placement.check(e.width, e.height, TRIG.patch_size)


def test_labeled_subset_avoids_poison():
    m = fake_manifest(5, 100)
    out = poison_targeted(m, PoisonRecipe.targeted(m, 2, 0.1, TRIG, 0))
    sub = select_labeled_subset(out, 0.1, seed=0)
    assert not (set(sub.ids) & out.poisoned_ids)
    assert sub.class_counts() == [10] * 5


# --- patched validation -----------------------------------------------------------


def test_patched_valset():
    v = fake_manifest(10, 500, split="val")
    a, b = build_patched_valset(v, TRIG, 4), build_patched_valset(v, TRIG, 4)
    assert a.n_poisoned == 5000
    assert [e.placement for e in a] == [e.placement for e in b]
    with pytest.raises(DataError):
        build_patched_valset(fake_manifest(2, 2), TRIG, 0)


def test_patched_images_differ_only_inside_rectangle(tmp_path, toy_val):
    patched = materialize(build_patched_valset(toy_val, TRIG, 1), tmp_path / "pv")
    trig = generate_trigger(TRIG)
    for e in list(patched)[:12]:
        img, clean = read_rgb(patched.path_of(e)), read_rgb(patched.clean_path_of(e))
        p = TRIG.patch_size
        diff = (img != clean).any(axis=2)
        diff[e.placement.y:e.placement.y + p, e.placement.x:e.placement.x + p] = False
        assert not diff.any()
        assert np.array_equal(img[e.placement.y:e.placement.y + p, e.placement.x:e.placement.x + p], trig.pixels)


# --- materialisation ------------------------------------------------------------------


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_zero_poison_tree_is_byte_equal(tmp_path, toy_root, toy_train):
    out = materialize(toy_train, tmp_path / "out")
    for e in out:
        src = toy_root / toy_train.entries[toy_train.ids.index(e.image_id)].relative_path
        assert filecmp.cmp(src, out.path_of(e), shallow=False)


def test_materialize_round_trip_and_determinism(tmp_path, toy_train):
    m = poison_targeted(toy_train, PoisonRecipe.targeted(toy_train, "class_2", 0.0625, TRIG, 3))
    a = materialize(m, tmp_path / "a")
    b = materialize(m, tmp_path / "b", workers=4)
    assert [_digest(a.path_of(e)) for e in a] == [_digest(b.path_of(e)) for e in b]
    trig = generate_trigger(TRIG)
    p = TRIG.patch_size
    for e in a:
        if e.is_poisoned:
            img = read_rgb(a.path_of(e))
            assert np.array_equal(img[e.placement.y:e.placement.y + p, e.placement.x:e.placement.x + p], trig.pixels)
    assert DatasetManifest.load(tmp_path / "a" / "manifest_train.json") == a
    view = a.unlabeled()
    assert all(it.clean_path is not None for it in view.items)
    assert view.content_hash() == m.training_hash()


def test_strip_poison(toy_train):
    m = poison_untargeted(toy_train, 0.1, TRIG, 0)
    assert strip_poison(m).entries == toy_train.entries
