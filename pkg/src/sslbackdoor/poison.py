"""Poison recipes and their application to manifests, plus materialisation to disk.

Counts are rounded half-to-even. Selection within a class is uniform without
replacement over id-sorted candidates, under a stream keyed by (seed, class
name); each placement is drawn from a stream keyed by (seed, image id), so
results depend neither on manifest order nor on processing order.
"""
from __future__ import annotations

import logging
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

from PIL import Image

from .errors import ConfigError, DataError, PlacementError, RateError
from .images import read_rgb
from .manifest import DatasetManifest, ManifestEntry
from .seeding import derive_rng
from .trigger import PlacementRecord, TriggerImage, TriggerSpec, generate_trigger, paste_trigger, sample_location

log = logging.getLogger(__name__)

MODES = ("targeted", "untargeted", "superclass")


@dataclass(frozen=True)
class PoisonRecipe:
    mode: str
    target_classes: tuple[int, ...]
    injection_rate: float
    within_class_fraction: float
    trigger: TriggerSpec
    rng_seed: int

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown poison mode {self.mode!r}")
        if not 0.0 <= self.injection_rate <= 1.0:
            raise RateError(f"injection rate {self.injection_rate} outside [0, 1]")
        if not 0.0 <= self.within_class_fraction <= 1.0:
            raise RateError(f"within-class fraction {self.within_class_fraction} outside [0, 1]")
        if len(set(self.target_classes)) != len(self.target_classes):
            raise ConfigError(f"duplicate target classes {self.target_classes}")
        n = len(self.target_classes)
        if self.mode == "targeted" and n != 1:
            raise ConfigError("targeted poisoning needs exactly one target class")
        if self.mode == "untargeted" and n != 0:
            raise ConfigError("untargeted poisoning takes no target classes")
        if self.mode == "superclass" and n < 1:
            raise ConfigError("superclass poisoning needs at least one target class")

    @classmethod
    def targeted(cls, manifest: DatasetManifest, target: str | int, rate: float, trigger: TriggerSpec, seed: int) -> "PoisonRecipe":
        """Recipe poisoning ``rate`` of the whole set, all drawn from ``target``."""
        t = manifest.class_index(target)
        n_target = manifest.class_counts()[t]
        want = round(rate * len(manifest))
        if want > n_target:
            raise RateError(
                f"rate {rate} needs {want} poisons but class {manifest.classes[t]!r} has {n_target} images"
            )
        fraction = want / n_target if n_target else 0.0
        return cls("targeted", (t,), rate, fraction, trigger, seed)

    @classmethod
    def superclass(cls, manifest: DatasetManifest, targets: Sequence[str | int], within_class_fraction: float, trigger: TriggerSpec, seed: int) -> "PoisonRecipe":
        idx = tuple(manifest.class_index(t) for t in targets)
        if len(set(idx)) != len(idx):
            raise ConfigError(f"duplicate classes in superclass list {list(targets)}")
        counts = manifest.class_counts()
        total = sum(round(within_class_fraction * counts[i]) for i in idx)
        rate = total / len(manifest) if len(manifest) else 0.0
        return cls("superclass", idx, rate, within_class_fraction, trigger, seed)

    @classmethod
    def untargeted(cls, rate: float, trigger: TriggerSpec, seed: int) -> "PoisonRecipe":
        return cls("untargeted", (), rate, 0.0, trigger, seed)

    def expected_count(self, manifest: DatasetManifest) -> int:
        if self.mode == "untargeted":
            return round(self.injection_rate * len(manifest))
        counts = manifest.class_counts()
        return sum(round(self.within_class_fraction * counts[c]) for c in self.target_classes)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "target_classes": list(self.target_classes),
            "injection_rate": self.injection_rate,
            "within_class_fraction": self.within_class_fraction,
            "trigger": {"trigger_id": self.trigger.trigger_id, "patch_size": self.trigger.patch_size, "seed": self.trigger.seed},
            "rng_seed": self.rng_seed,
        }


def _placement(entry: ManifestEntry, patch_size: int, seed: int, stream: str) -> PlacementRecord:
    x, y = sample_location(entry.width, entry.height, patch_size, derive_rng(seed, stream, entry.image_id))
    return PlacementRecord(entry.image_id, x, y)


def _mark(entry: ManifestEntry, trigger: TriggerSpec, seed: int, group: str, stream: str = "place") -> ManifestEntry:
    return replace(
        entry,
        is_poisoned=True,
        placement=_placement(entry, trigger.patch_size, seed, stream),
        trigger_id=trigger.trigger_id,
        poison_group=group,
    )


def _apply(manifest: DatasetManifest, chosen: set[str], recipe: PoisonRecipe, group: str, count: int) -> DatasetManifest:
    entries = tuple(
        _mark(e, recipe.trigger, recipe.rng_seed, group) if e.image_id in chosen else e
        for e in manifest.entries
    )
    record = dict(recipe.to_dict(), count=count)
    out = replace(manifest, entries=entries, poison=manifest.poison + (record,))
    assert out.n_poisoned == manifest.n_poisoned + count, "poison accounting drifted"
    return out


def _poison_classes(manifest: DatasetManifest, recipe: PoisonRecipe) -> DatasetManifest:
    if manifest.split != "train":
        raise DataError("only training manifests can be poisoned with a recipe")
    counts = manifest.class_counts()
    chosen: set[str] = set()
    for c in recipe.target_classes:
        k = round(recipe.within_class_fraction * counts[c])
        candidates = sorted((e for e in manifest.by_class(c) if not e.is_poisoned), key=lambda e: e.image_id)
        if k > len(candidates):
            raise RateError(
                f"cannot poison {k} images of class {manifest.classes[c]!r}: only {len(candidates)} clean"
            )
        rng = derive_rng(recipe.rng_seed, "select", manifest.classes[c])
        picks = rng.choice(len(candidates), size=k, replace=False)
        chosen.update(candidates[i].image_id for i in picks)
    if recipe.mode == "targeted" and recipe.injection_rate > 0:
        closed_form = round(recipe.injection_rate * len(manifest))
        if abs(len(chosen) - closed_form) > 1:
            raise RateError(
                f"within-class fraction gives {len(chosen)} poisons but the injection rate "
                f"{recipe.injection_rate} implies {closed_form}"
            )
    return _apply(manifest, chosen, recipe, "target", len(chosen))


def poison_targeted(manifest: DatasetManifest, recipe: PoisonRecipe) -> DatasetManifest:
    if recipe.mode != "targeted":
        raise ConfigError(f"poison_targeted got a {recipe.mode} recipe")
    return _poison_classes(manifest, recipe)


def poison_superclass(manifest: DatasetManifest, recipe: PoisonRecipe) -> DatasetManifest:
    if recipe.mode not in ("superclass", "targeted"):
        raise ConfigError(f"poison_superclass got a {recipe.mode} recipe")
    return _poison_classes(manifest, recipe)


def poison_untargeted(manifest: DatasetManifest, rate: float, trigger: TriggerSpec, rng_seed: int) -> DatasetManifest:
    """Poison ``round(rate * N)`` entries drawn uniformly from the still-clean entries."""
    recipe = PoisonRecipe.untargeted(rate, trigger, rng_seed)
    if manifest.split != "train":
        raise DataError("only training manifests can be poisoned with a recipe")
    k = recipe.expected_count(manifest)
    candidates = sorted((e for e in manifest.entries if not e.is_poisoned), key=lambda e: e.image_id)
    if k > len(candidates):
        raise RateError(f"cannot poison {k} images: only {len(candidates)} clean")
    rng = derive_rng(rng_seed, "select", "*untargeted*")
    picks = rng.choice(len(candidates), size=k, replace=False)
    chosen = {candidates[i].image_id for i in picks}
    return _apply(manifest, chosen, recipe, "random", k)


def apply_recipe(manifest: DatasetManifest, recipe: PoisonRecipe) -> DatasetManifest:
    if recipe.mode == "untargeted":
        return poison_untargeted(manifest, recipe.injection_rate, recipe.trigger, recipe.rng_seed)
    return _poison_classes(manifest, recipe)


def build_patched_valset(val_manifest: DatasetManifest, trigger: TriggerSpec, rng_seed: int) -> DatasetManifest:
    """Mark every validation image as patched, each with its own placement."""
    if val_manifest.split != "val":
        raise DataError(f"expected a val manifest, got split {val_manifest.split!r}")
    entries = tuple(
        _mark(e, trigger, rng_seed, "val", stream="val-place") for e in val_manifest.entries
    )
    record = {
        "mode": "patched_val",
        "trigger": {"trigger_id": trigger.trigger_id, "patch_size": trigger.patch_size, "seed": trigger.seed},
        "rng_seed": rng_seed,
        "count": len(entries),
    }
    return replace(val_manifest, entries=entries, poison=(record,))


def strip_poison(manifest: DatasetManifest) -> DatasetManifest:
    """The clean counterpart of a (possibly materialised) manifest, pointing at the originals."""
    entries = []
    for e in manifest.entries:
        if e.is_poisoned:
            if e.source_path is None:
                entries.append(replace(e, is_poisoned=False, placement=None, trigger_id=None, poison_group=None))
                continue
            raise DataError(
                "strip_poison on a materialised manifest would need the original tree; "
                "use the pre-materialisation manifest instead"
            )
        entries.append(e)
    return replace(manifest, entries=tuple(entries), poison=())


# --- materialisation ---------------------------------------------------------


def _triggers_for(manifest: DatasetManifest, triggers) -> dict[int, TriggerImage]:
    if isinstance(triggers, TriggerImage):
        triggers = {triggers.spec.trigger_id: triggers}
    lookup = dict(triggers or {})
    for rec in manifest.poison:
        t = rec.get("trigger")
        if t and t["trigger_id"] not in lookup:
            lookup[t["trigger_id"]] = generate_trigger(TriggerSpec(t["trigger_id"], t["patch_size"], t["seed"]))
    return lookup


def materialize(
    manifest: DatasetManifest,
    out_root: str | os.PathLike,
    triggers: TriggerImage | Mapping[int, TriggerImage] | None = None,
    workers: int = 1,
) -> DatasetManifest:
    """Write the manifest's images to ``<out_root>/<split>/<class>/<image_id>``.

    Clean entries are copied byte-for-byte (keeping their extension); poisoned
    entries are pasted and written as PNG. The returned manifest points at the
    new tree, remembers where each clean twin lives, and is saved as
    ``<out_root>/manifest_<split>.json``.
    """
    out_root = Path(out_root).resolve()
    lookup = _triggers_for(manifest, triggers)

    def one(entry: ManifestEntry) -> ManifestEntry:
        if entry.is_poisoned and entry.source_path is not None:
            src = Path(manifest.source_root) / entry.source_path
            src_root, src_rel = manifest.source_root, entry.source_path
        else:
            src = manifest.path_of(entry)
            src_root, src_rel = manifest.root, entry.relative_path
        if not src.is_file():
            raise DataError(f"source image for {entry.image_id!r} missing: {src}")
        cls_name = manifest.classes[entry.label]
        dest_dir = out_root / entry.split / cls_name
        dest_dir.mkdir(parents=True, exist_ok=True)
        if not entry.is_poisoned:
            dest = dest_dir / f"{entry.image_id}{src.suffix.lower()}"
            shutil.copyfile(src, dest)
            return replace(entry, relative_path=str(dest.relative_to(out_root)))
        image = read_rgb(src)
        h, w = image.shape[:2]
        trig = lookup.get(entry.trigger_id)
        if trig is None:
            raise DataError(f"no trigger image for trigger_id {entry.trigger_id}")
        try:
            entry.placement.check(w, h, trig.size)
        except PlacementError as exc:
            raise PlacementError(f"image {entry.image_id!r}: {exc}") from None
        dest = dest_dir / f"{entry.image_id}.png"
        Image.fromarray(paste_trigger(image, trig, entry.placement)).save(dest)
        return replace(
            entry,
            relative_path=str(dest.relative_to(out_root)),
            source_path=src_rel,
            width=w,
            height=h,
        ), src_root

    source_roots: set[str] = set()

    def run(entry):
        res = one(entry)
        if isinstance(res, tuple):
            res, root = res
            source_roots.add(root)
        return res

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            entries = tuple(pool.map(run, manifest.entries))
    else:
        entries = tuple(run(e) for e in manifest.entries)
    if len(source_roots) > 1:
        raise DataError(f"poisoned entries come from several source trees: {sorted(source_roots)}")
    out = replace(
        manifest,
        entries=entries,
        root=str(out_root),
        source_root=next(iter(source_roots), manifest.source_root),
    )
    out.save(out_root / f"manifest_{manifest.split}.json")
    return out
