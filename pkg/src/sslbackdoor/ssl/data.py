"""Training-time data access.

Datasets are built from an :class:`~sslbackdoor.manifest.UnlabeledView`, so the
training path never holds class labels.
"""
from __future__ import annotations

import torch
from torch.utils.data import Dataset

from ..errors import DataError
from ..images import read_many
from ..manifest import DatasetManifest, UnlabeledView
from ..seeding import derive_torch_generator
from .augment import augment_pair, augment_view, to_tensor
from .config import VIEW_MODES, AugmentationPolicy


def entry_view_mode(view_mode: str, is_poisoned: bool, poison_group: str | None) -> str:
    """How one entry's two views are formed under a dataset-level view mode.

    ``random_poison_both_views`` keeps class-agnostic ("random") poisons in both
    views while target-class poisons appear in one view only.
    """
    if not is_poisoned or view_mode == "standard":
        return "standard"
    if view_mode == "random_poison_both_views" and poison_group == "random":
        return "standard"
    return "one_view_poisoned"


class ViewDataset(Dataset):
    """Augmented views of an unlabeled image set.

    The randomness of item ``i`` in epoch ``e`` comes from a stream keyed by
    (seed, e, i): results are independent of worker count and iteration order.
    """

    def __init__(
        self,
        view: UnlabeledView,
        policy: AugmentationPolicy,
        seed: int,
        view_mode: str = "standard",
        n_views: int = 2,
        read_workers: int = 1,
    ):
        if isinstance(view, DatasetManifest):
            raise TypeError("ViewDataset takes an UnlabeledView; call manifest.unlabeled()")
        if view_mode not in VIEW_MODES:
            raise DataError(f"unknown view mode {view_mode!r}")
        unmaterialized = [it.image_id for it in view.items if it.is_poisoned and it.clean_path is None]
        if unmaterialized:
            raise DataError(
                f"{len(unmaterialized)} poisoned entries were never materialized "
                f"(e.g. {unmaterialized[:3]}); run materialize() first"
            )
        self.items = view.items
        self.policy = policy
        self.seed = seed
        self.view_mode = view_mode
        self.n_views = n_views
        self.epoch = 0
        self.images = [torch.from_numpy(a) for a in read_many([it.path for it in self.items], read_workers)]
        self.modes = [entry_view_mode(view_mode, it.is_poisoned, it.poison_group) for it in self.items]
        self.twins: dict[int, torch.Tensor] = {}
        need = [i for i, m in enumerate(self.modes) if m == "one_view_poisoned"]
        twins = read_many([self.items[i].clean_path for i in need], read_workers)
        self.twins = {i: torch.from_numpy(a) for i, a in zip(need, twins)}

    def __len__(self) -> int:
        return len(self.items)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __getitem__(self, i: int):
        g = derive_torch_generator(self.seed, "augment", self.epoch, i)
        if self.n_views == 1:
            v, _ = augment_view(to_tensor(self.images[i]), self.policy, g)
            return v, i
        v1, v2 = augment_pair(self.images[i], self.policy, g, self.modes[i], self.twins.get(i))
        return v1, v2, i

    def view_records(self, i: int) -> list:
        """Replays the augmentation of item ``i`` in the current epoch and returns its crop records."""
        g = derive_torch_generator(self.seed, "augment", self.epoch, i)
        records: list = []
        if self.n_views == 1:
            records.append(augment_view(to_tensor(self.images[i]), self.policy, g)[1])
        else:
            augment_pair(self.images[i], self.policy, g, self.modes[i], self.twins.get(i), records)
        return records
