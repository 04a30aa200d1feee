"""Frozen-feature evaluation: embeddings, linear probes and false-positive reports.

A false positive for class ``c`` is a validation image whose true class is not
``c`` but which the probe assigns to ``c``. Argmax ties go to the lowest class
index.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DataError, FormatError
from .images import read_many
from .manifest import DatasetManifest
from .seeding import derive_rng, derive_seed, resolve_device
from .ssl.augment import center_crop_view
from .ssl.train import EncoderCheckpoint

REPORT_SCHEMA_VERSION = 1


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    rows: np.ndarray
    row_ids: tuple[str, ...]
    checkpoint_hash: str
    preprocessing: str

    def __post_init__(self):
        if self.rows.ndim != 2 or self.rows.shape[0] != len(self.row_ids):
            raise DataError(f"{self.rows.shape} embedding rows for {len(self.row_ids)} ids")
        if len(set(self.row_ids)) != len(self.row_ids):
            raise DataError("duplicate row ids in embedding matrix")
        if not np.isfinite(self.rows).all():
            raise DataError("embedding matrix holds non-finite values")

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def __len__(self) -> int:
        return self.rows.shape[0]

    def take(self, image_ids: Sequence[str]) -> "EmbeddingMatrix":
        index = {r: i for i, r in enumerate(self.row_ids)}
        try:
            idx = [index[i] for i in image_ids]
        except KeyError as exc:
            raise DataError(f"image id {exc.args[0]!r} has no embedding row") from None
        return replace(self, rows=self.rows[idx], row_ids=tuple(image_ids))

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(fh, rows=self.rows, row_ids=np.array(self.row_ids),
                     checkpoint_hash=self.checkpoint_hash, preprocessing=self.preprocessing)
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "EmbeddingMatrix":
        with np.load(path) as z:
            return cls(z["rows"], tuple(str(s) for s in z["row_ids"]), str(z["checkpoint_hash"]), str(z["preprocessing"]))


def _check_materialized(manifest: DatasetManifest) -> None:
    stale = [e.image_id for e in manifest.entries if e.is_poisoned and e.source_path is None]
    if stale:
        raise DataError(f"{len(stale)} poisoned entries were never materialized (e.g. {stale[:3]})")


@torch.no_grad()
def extract_embeddings(
    checkpoint: EncoderCheckpoint,
    manifest: DatasetManifest,
    batch_size: int = 256,
    read_workers: int = 1,
    device: str | torch.device | None = None,
) -> EmbeddingMatrix:
    """Frozen tap-layer features for every manifest entry, in manifest order.

    Preprocessing is deterministic: shorter side resized to the training input
    size, centre crop, normalisation with the training statistics. Images
    smaller than the training input size are refused rather than upsampled.
    """
    _check_materialized(manifest)
    size = int(checkpoint.meta.get("input_size", 32))
    mean = checkpoint.meta.get("mean", (0.0, 0.0, 0.0))
    std = checkpoint.meta.get("std", (1.0, 1.0, 1.0))
    small = [e.image_id for e in manifest.entries if min(e.width, e.height) < size]
    if small:
        raise FormatError(
            f"{len(small)} images are smaller than the checkpoint's {size}px input (e.g. {small[:3]})"
        )
    device = resolve_device(device)
    model = checkpoint.build_model().to(device)
    tap = checkpoint.tap
    rows = []
    entries = manifest.entries
    for start in range(0, len(entries), batch_size):
        chunk = entries[start:start + batch_size]
        images = read_many([manifest.path_of(e) for e in chunk], read_workers)
        x = torch.stack([center_crop_view(im, size, mean, std) for im in images])
        rows.append(model.backbone.features(x.to(device), tap).double().cpu().numpy())
    dim = model.backbone.feature_dims[tap]
    matrix = np.concatenate(rows) if rows else np.zeros((0, dim))
    tag = f"center_crop={size};mean={list(mean)};std={list(std)};tap={tap}"
    return EmbeddingMatrix(matrix.astype(np.float32), manifest.ids, checkpoint.content_hash(), tag)


def select_labeled_subset(manifest: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """Class-stratified sample of never-poisoned entries.

    Each class contributes ``round(fraction * n_c)`` images with ``n_c`` its full
    size in the manifest; only clean entries are eligible.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"label fraction must lie in (0, 1], got {fraction}")
    chosen: set[str] = set()
    for c, name in enumerate(manifest.classes):
        members = manifest.by_class(c)
        clean = [e.image_id for e in members if not e.is_poisoned]
        k = round(fraction * len(members))
        if members and not clean:
            raise DataError(f"class {name!r} has no clean images to label")
        if k > len(clean):
            raise DataError(f"class {name!r}: {k} labels requested but only {len(clean)} clean images")
        if k:
            pick = derive_rng(seed, "labeled", name).choice(len(clean), size=k, replace=False)
            chosen.update(clean[i] for i in pick)
    subset = manifest.subset(chosen)
    assert not subset.poisoned_ids
    return subset


@dataclass(frozen=True)
class ProbeConfig:
    label_fraction: float = 0.01
    optimizer: str = "sgd"  # sgd | adam
    lr: float = 0.01
    weight_decay: float = 1e-4
    momentum: float = 0.9
    nesterov: bool = False
    epochs: int = 40
    schedule: str = "step"  # step | cosine
    milestones: tuple[int, ...] = (15, 30)
    gamma: float = 0.1
    final_lr: float = 0.0
    batch_size: int = 64
    standardize: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.label_fraction <= 1.0:
            raise ConfigError(f"label_fraction must lie in (0, 1], got {self.label_fraction}")
        if self.optimizer not in ("sgd", "adam") or self.schedule not in ("step", "cosine"):
            raise ConfigError("unknown probe optimizer or schedule")
        if self.epochs < 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ConfigError("probe epochs, batch size and lr must be positive")

    @classmethod
    def for_method(cls, method: str, **overrides) -> "ProbeConfig":
        """Per-method linear-evaluation recipes; SGD 0.01 with decays at 15 and 30 by default."""
        if method == "byol":
            cfg = cls(optimizer="adam", lr=1e-2, weight_decay=0.0, epochs=500, schedule="cosine", final_lr=1e-6)
        elif method == "rotnet":
            cfg = cls(lr=0.1, weight_decay=5e-4, nesterov=True, milestones=(5, 15, 25, 35))
        else:
            cfg = cls()
        return replace(cfg, **overrides)

    def lr_at(self, epoch: int) -> float:
        if self.schedule == "cosine":
            if self.epochs <= 1:
                return self.lr
            t = epoch / (self.epochs - 1)
            return self.final_lr + 0.5 * (self.lr - self.final_lr) * (1 + np.cos(np.pi * t))
        return self.lr * self.gamma ** sum(epoch >= m for m in self.milestones)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeConfig":
        d = dict(d)
        if "milestones" in d:
            d["milestones"] = tuple(d["milestones"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class LinearProbe:
    weight: np.ndarray  # (C, d)
    bias: np.ndarray  # (C,)
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    train_accuracy: float = float("nan")
    loss_history: tuple[float, ...] = ()

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def scores(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ConfigError(f"probe expects width {self.in_dim}, got inputs of shape {x.shape}")
        if self.mean is not None:
            x = (x - self.mean) / self.std
        return x @ self.weight.T.astype(np.float64) + self.bias.astype(np.float64)

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        extra = {} if self.mean is None else {"mean": self.mean, "std": self.std}
        with open(path, "wb") as fh:
            np.savez(fh, weight=self.weight, bias=self.bias, train_accuracy=self.train_accuracy,
                     loss_history=np.array(self.loss_history), **extra)
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "LinearProbe":
        with np.load(path) as z:
            return cls(
                z["weight"], z["bias"],
                z["mean"] if "mean" in z else None, z["std"] if "std" in z else None,
                float(z["train_accuracy"]), tuple(float(v) for v in z["loss_history"]),
            )


def _canonical_order(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # a content-defined order makes training independent of the caller's row order
    # (np.lexsort treats its last key as primary)
    return np.lexsort([*(x[:, j] for j in range(x.shape[1] - 1, -1, -1)), y])


def train_linear_probe(
    embeddings: np.ndarray | EmbeddingMatrix,
    labels: Sequence[int],
    config: ProbeConfig,
    num_classes: int | None = None,
) -> LinearProbe:
    """Multinomial logistic regression on frozen features with the configured schedule."""
    x = embeddings.rows if isinstance(embeddings, EmbeddingMatrix) else np.asarray(embeddings)
    x = x.astype(np.float32)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise DataError(f"{len(y)} labels for embeddings of shape {x.shape}")
    if len(np.unique(y)) < 2:
        raise DataError("probe training needs at least two distinct classes")
    n_classes = int(num_classes if num_classes is not None else y.max() + 1)
    order = _canonical_order(x, y)
    x, y = x[order], y[order]
    mean = std = None
    if config.standardize:
        mean = x.mean(axis=0, dtype=np.float64)
        std = x.std(axis=0, dtype=np.float64) + 1e-6
        x = ((x - mean) / std).astype(np.float32)

    g = torch.Generator().manual_seed(derive_seed(config.seed, "probe-init") & 0x7FFF_FFFF_FFFF_FFFF)
    layer = torch.nn.Linear(x.shape[1], n_classes)
    bound = 1.0 / np.sqrt(x.shape[1])
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=g)
        layer.bias.uniform_(-bound, bound, generator=g)
    if config.optimizer == "adam":
        opt = torch.optim.Adam(layer.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    else:
        opt = torch.optim.SGD(layer.parameters(), lr=config.lr, momentum=config.momentum,
                              weight_decay=config.weight_decay, nesterov=config.nesterov)
    xt, yt = torch.from_numpy(x), torch.from_numpy(y)
    history = []
    for epoch in range(config.epochs):
        for group in opt.param_groups:
            group["lr"] = config.lr_at(epoch)
        perm = derive_rng(config.seed, "probe-order", epoch).permutation(len(y))
        total = 0.0
        for s in range(0, len(y), config.batch_size):
            idx = torch.from_numpy(perm[s:s + config.batch_size])
            loss = F.cross_entropy(layer(xt[idx]), yt[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.append(total / len(y))
    weight = layer.weight.detach().numpy().copy()
    bias = layer.bias.detach().numpy().copy()
    # x is already standardised here, so score it with the raw weights
    acc = float((np.argmax(x.astype(np.float64) @ weight.T + bias, axis=1) == y).mean())
    return LinearProbe(weight, bias, mean, std, acc, tuple(history))


def predict(probe: LinearProbe, embeddings: np.ndarray | EmbeddingMatrix) -> np.ndarray:
    """Class index per row; ties resolve to the lowest index."""
    x = embeddings.rows if isinstance(embeddings, EmbeddingMatrix) else embeddings
    return np.argmax(probe.scores(x), axis=1)


def false_positives(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    wrong = pred != labels
    return np.bincount(pred[wrong], minlength=num_classes)


@dataclass
class EvalReport:
    classes: list[str]
    n_val: int
    clean_acc: float
    patched_acc: float
    fp_clean: list[int]
    fp_patched: list[int]
    target_class: str | None = None
    metadata: dict = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION

    @property
    def target_index(self) -> int | None:
        return None if self.target_class is None else self.classes.index(self.target_class)

    @property
    def target_fp_clean(self) -> int | None:
        t = self.target_index
        return None if t is None else self.fp_clean[t]

    @property
    def target_fp_patched(self) -> int | None:
        t = self.target_index
        return None if t is None else self.fp_patched[t]

    def top_fp(self, k: int = 10, patched: bool = True) -> list[tuple[str, int]]:
        fp = self.fp_patched if patched else self.fp_clean
        order = sorted(range(len(fp)), key=lambda c: (-fp[c], c))[:k]
        return [(self.classes[c], fp[c]) for c in order]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["top_fp_patched"] = [list(t) for t in self.top_fp()]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise FormatError(f"unsupported report schema version {d.get('schema_version')!r}")
        d = {k: v for k, v in d.items() if k != "top_fp_patched"}
        return cls(**d)

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def render(self) -> str:
        label = self.target_class if self.target_class is not None else "(all classes)"
        fp_c = self.target_fp_clean if self.target_class is not None else sum(self.fp_clean)
        fp_p = self.target_fp_patched if self.target_class is not None else sum(self.fp_patched)
        lines = [
            f"{'':<20}{'Clean data':>20}{'Patched data':>20}",
            f"{'target':<20}{'Acc':>10}{'FP':>10}{'Acc':>10}{'FP':>10}",
            f"{label:<20}{self.clean_acc:>10.1f}{fp_c:>10d}{self.patched_acc:>10.1f}{fp_p:>10d}",
            "top FP classes (patched): " + ", ".join(f"{n}={v}" for n, v in self.top_fp()),
        ]
        return "\n".join(lines)


def evaluate_predictions(
    pred_clean: np.ndarray,
    pred_patched: np.ndarray,
    labels: np.ndarray,
    classes: Sequence[str],
    target_class: str | int | None = None,
    metadata: dict | None = None,
) -> EvalReport:
    labels = np.asarray(labels)
    n = len(labels)
    if len(pred_clean) != n or len(pred_patched) != n:
        raise DataError("prediction and label counts differ")
    c = len(classes)
    target = classes[target_class] if isinstance(target_class, (int, np.integer)) else target_class
    if target is not None and target not in classes:
        raise DataError(f"unknown target class {target!r}")
    return EvalReport(
        classes=list(classes),
        n_val=n,
        clean_acc=100.0 * float((pred_clean == labels).mean()) if n else 0.0,
        patched_acc=100.0 * float((pred_patched == labels).mean()) if n else 0.0,
        fp_clean=false_positives(np.asarray(pred_clean), labels, c).tolist(),
        fp_patched=false_positives(np.asarray(pred_patched), labels, c).tolist(),
        target_class=target,
        metadata=metadata or {},
    )


def labels_of(manifest: DatasetManifest) -> np.ndarray:
    return np.array([e.label for e in manifest.entries], dtype=np.int64)


def fit_probe(
    checkpoint: EncoderCheckpoint,
    train_manifest: DatasetManifest,
    config: ProbeConfig,
    embeddings: EmbeddingMatrix | None = None,
    check_provenance: bool = True,
) -> tuple[LinearProbe, DatasetManifest]:
    """Select the labeled subset of ``train_manifest`` and fit a probe on its frozen features.

    Distilled students are trained on a subset of the data they are probed on;
    pass ``check_provenance=False`` for them.
    """
    if check_provenance:
        checkpoint.check_provenance(train_manifest)
    subset = select_labeled_subset(train_manifest, config.label_fraction, config.seed)
    emb = embeddings.take(subset.ids) if embeddings is not None else extract_embeddings(checkpoint, subset)
    probe = train_linear_probe(emb, labels_of(subset), config, len(train_manifest.classes))
    return probe, subset


def evaluate(
    probe: LinearProbe,
    checkpoint: EncoderCheckpoint,
    clean_val: DatasetManifest,
    patched_val: DatasetManifest,
    target_class: str | int | None = None,
    metadata: dict | None = None,
    clean_embeddings: EmbeddingMatrix | None = None,
    patched_embeddings: EmbeddingMatrix | None = None,
) -> EvalReport:
    """Accuracy and per-class false positives on clean and patched validation data."""
    if set(clean_val.ids) != set(patched_val.ids):
        raise DataError("clean and patched validation manifests cover different image ids")
    if clean_val.classes != patched_val.classes:
        raise DataError("clean and patched validation manifests disagree on classes")
    patched_val = patched_val.subset(clean_val.ids)
    order = {i: k for k, i in enumerate(patched_val.ids)}
    patched_entries = sorted(patched_val.entries, key=lambda e: order[e.image_id])
    if [e.label for e in patched_entries] != [e.label for e in clean_val.entries]:
        raise DataError("clean and patched validation labels disagree")
    ec = clean_embeddings or extract_embeddings(checkpoint, clean_val)
    ep = patched_embeddings or extract_embeddings(checkpoint, patched_val)
    ec, ep = ec.take(clean_val.ids), ep.take(clean_val.ids)
    meta = {
        "checkpoint_hash": checkpoint.content_hash(),
        "training_manifest_hash": checkpoint.manifest_hash,
        "clean_val_hash": clean_val.content_hash(),
        "patched_val_hash": patched_val.content_hash(),
        "method": checkpoint.method,
    }
    meta.update(metadata or {})
    return evaluate_predictions(
        predict(probe, ec), predict(probe, ep), labels_of(clean_val), clean_val.classes, target_class, meta
    )


@dataclass(frozen=True)
class SampleSpec:
    classes: tuple[str, ...] = ()
    per_class: int = 0
    patched: int = 0
    seed: int = 0


def export_embeddings(
    clean: EmbeddingMatrix,
    clean_manifest: DatasetManifest,
    spec: SampleSpec,
    out_path: str | os.PathLike,
    patched: EmbeddingMatrix | None = None,
    patched_manifest: DatasetManifest | None = None,
) -> tuple[Path, Path]:
    """Write a CSV (``image_id,label,is_patched,e0..``) plus a JSON sidecar.

    Clean rows: ``per_class`` images from each listed class. Patched rows:
    ``patched`` images drawn from the listed classes of the patched manifest.
    """
    rows: list[tuple[str, int, int, np.ndarray]] = []
    for name in spec.classes:
        c = clean_manifest.class_index(name)
        ids = [e.image_id for e in clean_manifest.by_class(c)]
        if spec.per_class > len(ids):
            raise DataError(f"class {name!r} has {len(ids)} images, {spec.per_class} requested")
        pick = sorted(derive_rng(spec.seed, "export", name).choice(len(ids), spec.per_class, replace=False))
        emb = clean.take([ids[i] for i in pick])
        rows += [(i, c, 0, r) for i, r in zip(emb.row_ids, emb.rows)]
    if spec.patched:
        if patched is None or patched_manifest is None:
            raise DataError("patched rows requested without patched embeddings")
        wanted = {patched_manifest.class_index(n) for n in spec.classes} if spec.classes else None
        pool = [e for e in patched_manifest.entries if wanted is None or e.label in wanted]
        if spec.patched > len(pool):
            raise DataError(f"{spec.patched} patched rows requested but only {len(pool)} available")
        pick = sorted(derive_rng(spec.seed, "export-patched").choice(len(pool), spec.patched, replace=False))
        chosen = [pool[i] for i in pick]
        emb = patched.take([e.image_id for e in chosen])
        rows += [(e.image_id, e.label, 1, r) for e, r in zip(chosen, emb.rows)]

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    dim = clean.dim
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "label", "is_patched"] + [f"e{j}" for j in range(dim)])
        for image_id, label, flag, vec in rows:
            w.writerow([image_id, label, flag] + [repr(float(v)) for v in vec])
    sidecar = out_path.with_suffix(".json")
    sidecar.write_text(json.dumps({
        "classes": list(clean_manifest.classes),
        "sample_spec": asdict(spec),
        "n_rows": len(rows),
        "dim": dim,
        "checkpoint_hash": clean.checkpoint_hash,
        "preprocessing": clean.preprocessing,
        "clean_manifest_hash": clean_manifest.content_hash(),
        "patched_manifest_hash": None if patched_manifest is None else patched_manifest.content_hash(),
    }, sort_keys=True, indent=1) + "\n")
    return out_path, sidecar
