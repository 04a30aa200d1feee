"""Dataset manifests: the authoritative record of every image in a split.

Labels are kept for probe training and evaluation only. Training code receives
an :class:`UnlabeledView`, which has no label attribute at all.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from PIL import Image

from .errors import DataError, FormatError
from .trigger import PlacementRecord

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".webp", ".tif", ".tiff"}
SPLITS = ("train", "val")


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    relative_path: str
    label: int
    split: str
    width: int
    height: int
    is_poisoned: bool = False
    placement: PlacementRecord | None = None
    trigger_id: int | None = None
    # "target" (class-specific poison), "random" (class-agnostic) or "val" (patched validation)
    poison_group: str | None = None
    # for materialised poisoned entries: path of the clean original, relative to source_root
    source_path: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["placement"] = None if self.placement is None else {"x": self.placement.x, "y": self.placement.y}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        d = dict(d)
        pl = d.pop("placement", None)
        placement = None if pl is None else PlacementRecord(d["image_id"], int(pl["x"]), int(pl["y"]))
        return cls(placement=placement, **d)


@dataclass(frozen=True, eq=False)
class DatasetManifest:
    dataset_name: str
    split: str
    classes: tuple[str, ...]
    entries: tuple[ManifestEntry, ...]
    root: str
    source_root: str | None = None
    # one record per poisoning operation applied, in order
    poison: tuple[dict, ...] = ()
    rounding: str = "half_even"
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.image_id in seen:
                raise DataError(f"duplicate image_id {e.image_id!r} in manifest")
            seen.add(e.image_id)
            if e.is_poisoned != (e.placement is not None) or e.is_poisoned != (e.trigger_id is not None):
                raise DataError(
                    f"entry {e.image_id!r}: poisoned entries need a placement and trigger_id, "
                    "clean entries must have neither"
                )

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    def __eq__(self, other):
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    @property
    def n_poisoned(self) -> int:
        return sum(e.is_poisoned for e in self.entries)

    @property
    def poisoned_ids(self) -> frozenset[str]:
        return frozenset(e.image_id for e in self.entries if e.is_poisoned)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(e.image_id for e in self.entries)

    def class_counts(self) -> list[int]:
        counts = [0] * len(self.classes)
        for e in self.entries:
            counts[e.label] += 1
        return counts

    def by_class(self, label: int) -> list[ManifestEntry]:
        return [e for e in self.entries if e.label == label]

    def class_index(self, name_or_index: str | int) -> int:
        if isinstance(name_or_index, int):
            if not 0 <= name_or_index < len(self.classes):
                raise DataError(f"class index {name_or_index} out of range")
            return name_or_index
        try:
            return self.classes.index(name_or_index)
        except ValueError:
            raise DataError(f"unknown class {name_or_index!r}") from None

    def path_of(self, entry: ManifestEntry) -> Path:
        return Path(self.root) / entry.relative_path

    def clean_path_of(self, entry: ManifestEntry) -> Path:
        """Location of the un-pasted original of an entry."""
        if entry.is_poisoned and entry.source_path is not None:
            if self.source_root is None:
                raise DataError(f"manifest lacks source_root for clean twin of {entry.image_id!r}")
            return Path(self.source_root) / entry.source_path
        if entry.is_poisoned:
            raise DataError(f"no clean twin recorded for poisoned entry {entry.image_id!r}")
        return self.path_of(entry)

    def subset(self, image_ids: Iterable[str]) -> "DatasetManifest":
        keep = set(image_ids)
        missing = keep - set(self.ids)
        if missing:
            raise DataError(f"{len(missing)} ids not in manifest, e.g. {sorted(missing)[:3]}")
        return replace(self, entries=tuple(e for e in self.entries if e.image_id in keep))

    def with_labels(self, labels: Sequence[int]) -> "DatasetManifest":
        if len(labels) != len(self.entries):
            raise DataError("label list length does not match manifest")
        return replace(
            self, entries=tuple(replace(e, label=int(l)) for e, l in zip(self.entries, labels))
        )

    def unlabeled(self) -> "UnlabeledView":
        return UnlabeledView.from_manifest(self)

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "dataset_name": self.dataset_name,
            "split": self.split,
            "classes": list(self.classes),
            "root": self.root,
            "source_root": self.source_root,
            "rounding": self.rounding,
            "poison": list(self.poison),
            "entries": [e.to_dict() for e in self.entries],
        }

    def content_hash(self) -> str:
        return _sha256_json(self.to_dict())

    def training_hash(self) -> str:
        """Hash of everything the training path can see (labels excluded)."""
        return self.unlabeled().content_hash()

    def to_json(self) -> str:
        d = self.to_dict()
        d["content_hash"] = self.content_hash()
        return json.dumps(d, sort_keys=True, indent=1) + "\n"

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise FormatError(f"unsupported manifest schema version {version!r}")
        return cls(
            dataset_name=d["dataset_name"],
            split=d["split"],
            classes=tuple(d["classes"]),
            entries=tuple(ManifestEntry.from_dict(e) for e in d["entries"]),
            root=d["root"],
            source_root=d.get("source_root"),
            poison=tuple(d.get("poison") or ()),
            rounding=d.get("rounding", "half_even"),
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        stored = d.pop("content_hash", None)
        manifest = cls.from_dict(d)
        if stored is not None and stored != manifest.content_hash():
            raise DataError(f"manifest {path} content hash mismatch (file edited?)")
        return manifest


@dataclass(frozen=True)
class UnlabeledItem:
    image_id: str
    path: str
    clean_path: str | None
    is_poisoned: bool
    placement: PlacementRecord | None
    trigger_id: int | None
    poison_group: str | None


@dataclass(frozen=True)
class UnlabeledView:
    """What SSL training is allowed to see of a manifest."""

    dataset_name: str
    items: tuple[UnlabeledItem, ...] = field(default_factory=tuple)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "UnlabeledView":
        items = []
        for e in manifest.entries:
            clean = None
            if not e.is_poisoned or e.source_path is not None:
                clean = str(manifest.clean_path_of(e))
            items.append(
                UnlabeledItem(
                    image_id=e.image_id,
                    path=str(manifest.path_of(e)),
                    clean_path=clean,
                    is_poisoned=e.is_poisoned,
                    placement=e.placement,
                    trigger_id=e.trigger_id,
                    poison_group=e.poison_group,
                )
            )
        return cls(manifest.dataset_name, tuple(items))

    def __len__(self) -> int:
        return len(self.items)

    def content_hash(self) -> str:
        # file locations are excluded so that relocating a dataset keeps its identity
        payload = [
            [
                it.image_id,
                it.is_poisoned,
                None if it.placement is None else [it.placement.x, it.placement.y],
                it.trigger_id,
                it.poison_group,
            ]
            for it in self.items
        ]
        return _sha256_json({"dataset_name": self.dataset_name, "items": payload})


def _sha256_json(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def build_manifest(root: str | os.PathLike, split: str = "train", dataset_name: str | None = None) -> DatasetManifest:
    """Scan ``<root>/<split>/<class>/<image>`` into a manifest sorted by (class, filename).

    The image id is the file stem, which must be unique within the split.
    """
    root = Path(root)
    split_dir = root / split
    if not split_dir.is_dir():
        raise DataError(f"{split_dir} is not a directory")
    classes = sorted(p.name for p in split_dir.iterdir() if p.is_dir())
    if not classes:
        raise DataError(f"no class directories under {split_dir}")
    entries = []
    for label, cls_name in enumerate(classes):
        files = sorted(p for p in (split_dir / cls_name).iterdir() if p.is_file())
        n_before = len(entries)
        for f in files:
            if f.suffix.lower() not in IMAGE_EXTENSIONS:
                log.info("skipping non-image file %s", f)
                continue
            try:
                with Image.open(f) as im:
                    width, height = im.size
            except OSError:
                log.info("skipping unreadable image %s", f)
                continue
            entries.append(
                ManifestEntry(
                    image_id=f.stem,
                    relative_path=str(f.relative_to(root)),
                    label=label,
                    split=split,
                    width=width,
                    height=height,
                )
            )
        if len(entries) == n_before:
            warnings.warn(f"class directory {split_dir / cls_name} holds no images", stacklevel=2)
    return DatasetManifest(
        dataset_name=dataset_name or root.name,
        split=split,
        classes=tuple(classes),
        entries=tuple(entries),
        root=str(root.resolve()),
    )
