"""Make a trigger, poison one class of a small dataset and look at the result.

    python3 demos/01_trigger_and_poisoning.py
"""
import numpy as np

from _toy import OUT, toy_root
from sslbackdoor.images import read_rgb
from sslbackdoor.manifest import build_manifest
from sslbackdoor.poison import PoisonRecipe, apply_recipe, build_patched_valset, materialize
from sslbackdoor.probe import select_labeled_subset
from sslbackdoor.trigger import TriggerSpec, default_patch_size, generate_trigger, save_trigger

root = toy_root()
train = build_manifest(root, "train")
val = build_manifest(root, "val")
print(f"dataset: {len(train)} train / {len(val)} val images, classes {train.classes}")

# the trigger is a seeded 4x4 colour grid upscaled to a quarter of the image side
spec = TriggerSpec(trigger_id=10, patch_size=default_patch_size(32, 32))
trigger = generate_trigger(spec)
patch_path, base_path = save_trigger(trigger, OUT / "triggers")
print(f"trigger {spec.trigger_id}: {trigger.pixels.shape} -> {patch_path}")

# poison 5% of the whole training set, all of it drawn from the target class
recipe = PoisonRecipe.targeted(train, "class_1", 0.05, spec, seed=0)
poisoned = materialize(apply_recipe(train, recipe), OUT / "poisoned_train")
print(f"poisoned {poisoned.n_poisoned} images "
      f"({recipe.within_class_fraction:.1%} of class_1, {poisoned.n_poisoned / len(poisoned):.1%} of the set)")

entry = next(e for e in poisoned if e.is_poisoned)
img, clean = read_rgb(poisoned.path_of(entry)), read_rgb(poisoned.clean_path_of(entry))
changed = (img != clean).any(axis=2)
ys, xs = np.nonzero(changed)
print(f"{entry.image_id}: trigger at {entry.placement.x},{entry.placement.y}; "
      f"changed pixels span x {xs.min()}..{xs.max()}, y {ys.min()}..{ys.max()}")

# the labels used later by the linear probe never include a poisoned image
labeled = select_labeled_subset(poisoned, 0.25, seed=0)
print(f"labeled subset: {len(labeled)} images, overlap with poison: {len(set(labeled.ids) & poisoned.poisoned_ids)}")

# every validation image gets the trigger at a random spot for the patched set
patched = materialize(build_patched_valset(val, spec, 0), OUT / "patched_val")
print(f"patched validation set: {len(patched)} images -> {OUT / 'patched_val'}")
