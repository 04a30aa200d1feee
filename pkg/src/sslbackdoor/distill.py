"""Anchor-similarity distillation (CompRess, 1q variant) as a backdoor defence.

Teacher and student embeddings are both compared against the frozen teacher
embeddings of a random anchor set; the student minimises KL(teacher || student)
between the two softmax distributions. The student starts from random weights
and only ever sees the clean data it is given.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F
from torch.utils.data import DataLoader

from .errors import ConfigError, ContractError, DataError, TrainingDivergence
from .images import read_many
from .manifest import DatasetManifest
from .seeding import derive_rng, derive_seed, resolve_device
from .ssl.augment import center_crop_view
from .ssl.backbone import ResNet18, mlp
from .ssl.config import AugmentationPolicy, OptimizerConfig, ScheduleConfig, lr_at
from .ssl.data import ViewDataset
from .ssl.losses import check_unit
from .ssl.train import EncoderCheckpoint

log = logging.getLogger(__name__)

Q_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class AnchorBank:
    anchors: torch.Tensor  # (A, d), unit rows
    anchor_ids: tuple[str, ...]
    temperature: float

    def __post_init__(self):
        if self.anchors.dim() != 2 or self.anchors.shape[0] == 0:
            raise ConfigError("anchor bank is empty")
        if self.temperature <= 0:
            raise ConfigError(f"distillation temperature must be positive, got {self.temperature}")
        if len(self.anchor_ids) != self.anchors.shape[0]:
            raise ConfigError("anchor ids do not match anchor rows")
        check_unit(self.anchors, "anchor bank", 1e-5)

    def __len__(self) -> int:
        return self.anchors.shape[0]


def similarity_logits(embedding: torch.Tensor, bank: AnchorBank) -> torch.Tensor:
    anchors = bank.anchors.to(embedding.dtype)
    return embedding @ anchors.T / bank.temperature


def similarity_distribution(embedding, bank: AnchorBank):
    """Softmax over anchor cosine similarities divided by the temperature.

    Accepts a single unit vector or a batch of them, as numpy or torch.
    """
    as_numpy = isinstance(embedding, np.ndarray)
    e = torch.from_numpy(embedding) if as_numpy else embedding
    check_unit(e, "embedding")
    p = F.softmax(similarity_logits(e, bank), dim=-1)
    return p.numpy() if as_numpy else p


def compress_loss(teacher_dist, student_dist, tol: float = 1e-4):
    """KL(p || q) = sum p_i ln(p_i / q_i), with q clamped below at 1e-12.

    Terms with p_i = 0 contribute nothing. Batched inputs return the batch mean.
    """
    as_numpy = isinstance(teacher_dist, np.ndarray)
    p = torch.as_tensor(teacher_dist)
    q = torch.as_tensor(student_dist)
    if p.shape != q.shape:
        raise ContractError(f"distribution shapes differ: {tuple(p.shape)} vs {tuple(q.shape)}")
    for name, v in (("teacher", p), ("student", q)):
        if (v < 0).any() or ((v.sum(-1) - 1).abs() > tol).any():
            raise ContractError(f"{name} distribution is not a probability vector")
    terms = torch.where(p > 0, p * (torch.log(p.clamp_min(Q_FLOOR)) - torch.log(q.clamp_min(Q_FLOOR))), torch.zeros_like(p))
    kl = terms.sum(-1).mean() if p.dim() > 1 else terms.sum()
    return float(kl) if as_numpy else kl


def compress_loss_from_logits(teacher_logits: torch.Tensor, student_logits: torch.Tensor) -> torch.Tensor:
    """Same quantity as :func:`compress_loss`, computed stably from logits."""
    log_p = F.log_softmax(teacher_logits, dim=-1)
    log_q = F.log_softmax(student_logits, dim=-1).clamp_min(math.log(Q_FLOOR))
    return (log_p.exp() * (log_p - log_q)).sum(-1).mean()


@dataclass(frozen=True)
class DistillConfig:
    clean_fraction: float = 0.25
    anchor_count: int = 4096
    temperature: float = 0.04
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig("sgd", 0.05, 1e-4, 0.9))
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    epochs: int = 200
    batch_size: int = 256
    student_width: int | None = None
    hidden_dim: int = 512
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.clean_fraction <= 1.0:
            raise ConfigError(f"clean_fraction must lie in (0, 1], got {self.clean_fraction}")
        if self.anchor_count <= 0 or self.temperature <= 0:
            raise ConfigError("anchor_count and temperature must be positive")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ConfigError("epochs must be non-negative and batch_size positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        d = dict(d)
        if isinstance(d.get("optimizer"), dict):
            d["optimizer"] = OptimizerConfig(**d["optimizer"])
        if isinstance(d.get("schedule"), dict):
            s = dict(d["schedule"])
            s["milestones"] = tuple(s.get("milestones", ()))
            d["schedule"] = ScheduleConfig(**s)
        return cls(**d)


class CompressStudent(nn.Module):
    """Backbone plus an MLP head into the teacher's embedding space."""

    def __init__(self, width: int, stem: str, hidden_dim: int, embedding_dim: int):
        super().__init__()
        self.backbone = ResNet18(width, stem)
        self.head = mlp(self.backbone.out_dim, hidden_dim, embedding_dim)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.head(self.backbone(x)), dim=1)


def build_student(config: dict) -> CompressStudent:
    return CompressStudent(config["backbone_width"], config["stem"], config["hidden_dim"], config["embedding_dim"])


def select_clean_subset(manifest: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """Uniform sample of ``round(fraction * N)`` entries (labels are not consulted)."""
    k = round(fraction * len(manifest))
    pick = derive_rng(seed, "distill-subset").choice(len(manifest), size=k, replace=False)
    return manifest.subset(manifest.ids[i] for i in pick)


@torch.no_grad()
def _embed_images(model, manifest: DatasetManifest, meta: dict, batch_size: int = 256) -> torch.Tensor:
    size, mean, std = int(meta.get("input_size", 32)), meta.get("mean", (0, 0, 0)), meta.get("std", (1, 1, 1))
    out = []
    for s in range(0, len(manifest), batch_size):
        chunk = manifest.entries[s:s + batch_size]
        images = read_many([manifest.path_of(e) for e in chunk])
        x = torch.stack([center_crop_view(im, size, mean, std) for im in images])
        out.append(model.embed(x.to(next(model.parameters()).device)))
    return torch.cat(out)


def build_anchor_bank(teacher, manifest: DatasetManifest, count: int, temperature: float, seed: int, meta: dict) -> AnchorBank:
    n = min(count, len(manifest))
    if n < count:
        log.warning("only %d clean images available; using %d anchors instead of %d", len(manifest), n, count)
    pick = sorted(derive_rng(seed, "anchors").choice(len(manifest), size=n, replace=False))
    anchors = manifest.subset(manifest.ids[i] for i in pick)
    return AnchorBank(_embed_images(teacher, anchors, meta).detach(), anchors.ids, temperature)


def _collate(batch):
    views, ids = zip(*batch)
    return torch.stack(views), list(ids)


def distill(
    teacher_ckpt: EncoderCheckpoint,
    clean_manifest: DatasetManifest,
    config: DistillConfig,
    out_dir: str | os.PathLike | None = None,
    policy: AugmentationPolicy | None = None,
    workers: int = 0,
    device: str | torch.device | None = None,
) -> EncoderCheckpoint:
    """Distil ``teacher_ckpt`` into a freshly initialised student on clean data only."""
    poisoned = sorted(clean_manifest.poisoned_ids)
    if poisoned:
        raise DataError(f"clean manifest holds {len(poisoned)} poisoned entries: {poisoned[:20]}")
    teacher_hash = teacher_ckpt.content_hash()
    device = resolve_device(device)
    teacher = teacher_ckpt.build_model().to(device)
    for p in teacher.parameters():
        p.requires_grad = False
    meta = dict(teacher_ckpt.meta)
    size = int(meta.get("input_size", 32))

    subset = select_clean_subset(clean_manifest, config.clean_fraction, config.seed)
    bank = build_anchor_bank(teacher, subset, config.anchor_count, config.temperature, config.seed, meta)
    emb_dim = bank.anchors.shape[1]

    tcfg = teacher_ckpt.config
    student_cfg = {
        "backbone_width": config.student_width or tcfg.get("backbone_width", 64),
        "stem": tcfg.get("stem", "cifar"),
        "hidden_dim": config.hidden_dim,
        "embedding_dim": emb_dim,
        "seed": config.seed,
        "distill": config.to_dict(),
        "teacher_hash": teacher_hash,
    }
    torch.manual_seed(derive_seed(config.seed, "student-init") & 0x7FFF_FFFF_FFFF_FFFF)
    student = build_student(student_cfg).to(device)
    opt_cfg = config.optimizer
    if opt_cfg.kind == "adam":
        optimizer = torch.optim.Adam(student.parameters(), lr=opt_cfg.lr, weight_decay=opt_cfg.weight_decay)
    else:
        optimizer = torch.optim.SGD(student.parameters(), lr=opt_cfg.lr, momentum=opt_cfg.momentum,
                                    weight_decay=opt_cfg.weight_decay, nesterov=opt_cfg.nesterov)

    if policy is None:
        policy = AugmentationPolicy.light(size)
        policy = AugmentationPolicy.from_dict({**policy.to_dict(), "mean": tuple(meta.get("mean", policy.mean)),
                                               "std": tuple(meta.get("std", policy.std))})
    dataset = ViewDataset(subset.unlabeled(), policy, derive_seed(config.seed, "distill-views"), n_views=1)
    n_batches = len(dataset) // config.batch_size
    if config.epochs and n_batches == 0:
        raise ConfigError(f"batch size {config.batch_size} exceeds the {len(dataset)} clean images")
    total = n_batches * config.epochs

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "distill_log.jsonl").unlink(missing_ok=True)
    step = 0
    student.train()
    for epoch in range(config.epochs):
        dataset.set_epoch(epoch)
        order = derive_rng(config.seed, "distill-order", epoch).permutation(len(dataset))[: n_batches * config.batch_size]
        loader = DataLoader(dataset, batch_size=config.batch_size, sampler=order.tolist(),
                            num_workers=workers, collate_fn=_collate, drop_last=True)
        records = []
        for x, ids in loader:
            x = x.to(device)
            lr = lr_at(opt_cfg.lr, config.schedule, step, total, n_batches)
            for group in optimizer.param_groups:
                group["lr"] = lr
            with torch.no_grad():
                t_logits = similarity_logits(teacher.embed(x), bank)
            loss = compress_loss_from_logits(t_logits, similarity_logits(student.embed(x), bank))
            if not torch.isfinite(loss):
                raise TrainingDivergence(f"non-finite distillation loss at step {step} (lr={lr}, batch ids={ids[:8]})")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            records.append({"step": step, "epoch": epoch, "lr": lr, "loss": loss.item()})
            step += 1
        if out is not None:
            with open(out / "distill_log.jsonl", "a") as fh:
                fh.writelines(json.dumps(r) + "\n" for r in records)

    if teacher_ckpt.content_hash() != teacher_hash:
        raise RuntimeError("teacher checkpoint changed during distillation")
    student.eval()
    state = {k: v.detach().cpu().clone() for k, v in student.state_dict().items()}
    meta.update({
        "teacher_hash": teacher_hash,
        "anchor_count": len(bank),
        "clean_subset_size": len(subset),
        "clean_subset_hash": subset.content_hash(),
    })
    ckpt = EncoderCheckpoint("compress_student", student_cfg, state, subset.training_hash(), config.epochs, meta)
    if out is not None:
        ckpt.save(out / "student.pt")
    return ckpt
