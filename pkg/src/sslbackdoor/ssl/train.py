"""Training loop and encoder checkpoints."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch.utils.data import DataLoader

from ..errors import ConfigError, FormatError, ProvenanceError, ProvenanceWarning
from ..manifest import DatasetManifest, UnlabeledView
from ..seeding import derive_rng, derive_seed, resolve_device
from .backbone import TAPS
from .config import AugmentationPolicy, MethodConfig, lr_at
from .data import ViewDataset
from .methods import SSLMethod, build_method, build_optimizer, train_step

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


@dataclass
class EncoderCheckpoint:
    """A trained model plus what it was trained on.

    ``state_dict`` holds the full method module (backbone, heads, EMA target,
    queue). ``meta`` carries the evaluation preprocessing (input size, mean, std)
    and free-form run details such as the view mode.
    """

    method: str
    config: dict
    state_dict: dict
    manifest_hash: str
    epoch: int
    meta: dict = field(default_factory=dict)

    @property
    def tap(self) -> str:
        return TAPS[self.method]

    def build_model(self) -> torch.nn.Module:
        if self.method == "compress_student":
            from ..distill import build_student

            model = build_student(self.config)
        else:
            model = build_method(MethodConfig.from_dict(self.config))
        model.load_state_dict(self.state_dict)
        model.eval()
        return model

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps([self.method, self.config, self.manifest_hash, self.epoch], sort_keys=True).encode())
        for name in sorted(self.state_dict):
            t = self.state_dict[name].detach().cpu().contiguous()
            h.update(name.encode())
            h.update(str(t.dtype).encode())
            h.update(t.numpy().tobytes())
        return h.hexdigest()

    def check_provenance(self, manifest: DatasetManifest | UnlabeledView, strict: bool = False) -> bool:
        """Compares the training-manifest hash; warns (or raises when ``strict``) on mismatch."""
        got = manifest.training_hash() if isinstance(manifest, DatasetManifest) else manifest.content_hash()
        if got == self.manifest_hash:
            return True
        msg = f"checkpoint was trained on manifest {self.manifest_hash[:12]}, evaluating against {got[:12]}"
        if strict:
            raise ProvenanceError(msg)
        warnings.warn(msg, ProvenanceWarning, stacklevel=2)
        return False

    def to_payload(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "method": self.method,
            "config": self.config,
            "state_dict": self.state_dict,
            "manifest_hash": self.manifest_hash,
            "epoch": self.epoch,
            "meta": self.meta,
        }

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(self.to_payload(), tmp)
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "EncoderCheckpoint":
        try:
            payload = torch.load(path, map_location="cpu", weights_only=False)
        except (OSError, RuntimeError, EOFError) as exc:
            raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
        if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
            raise FormatError(f"{path} is not a version-{CHECKPOINT_FORMAT} encoder checkpoint")
        return cls(
            payload["method"], payload["config"], payload["state_dict"],
            payload["manifest_hash"], payload["epoch"], payload.get("meta", {}),
        )


def _snapshot(model: torch.nn.Module) -> dict:
    buf = io.BytesIO()
    torch.save(model.state_dict(), buf)
    buf.seek(0)
    return torch.load(buf, map_location="cpu", weights_only=True)


def _rng_state(model: SSLMethod) -> dict:
    gen = getattr(model, "_gen", None)
    return {"jigsaw": gen.get_state()} if gen is not None else {}


def _set_rng_state(model: SSLMethod, state: dict) -> None:
    if "jigsaw" in state:
        model._gen.set_state(state["jigsaw"])


def _collate(batch):
    *views, ids = zip(*batch)
    return [torch.stack(v) for v in views], list(ids)


def initial_model(config: MethodConfig) -> SSLMethod:
    """The untrained model that :func:`train` starts from."""
    torch.manual_seed(derive_seed(config.seed, "init") & 0x7FFF_FFFF_FFFF_FFFF)
    return build_method(config)


def train(
    config: MethodConfig,
    data: DatasetManifest | UnlabeledView,
    policy: AugmentationPolicy | None = None,
    view_mode: str = "standard",
    out_dir: str | os.PathLike | None = None,
    workers: int = 0,
    resume: bool = False,
    log_crops: bool = False,
    device: str | torch.device | None = None,
) -> EncoderCheckpoint:
    """Train an SSL encoder on unlabeled data.

    Labels never reach this function's data path: a manifest is reduced to its
    :class:`UnlabeledView` on entry. With ``out_dir`` set, the loss series is
    appended to ``train_log.jsonl``, ``checkpoint_last.pt`` is refreshed after
    every epoch (and used by ``resume``), and the final model is written to
    ``checkpoint.pt``. ``device`` defaults to ``$SSLBACKDOOR_DEVICE`` or the CPU.
    """
    view = data.unlabeled() if isinstance(data, DatasetManifest) else data
    policy = policy or AugmentationPolicy.for_method(config.method)
    manifest_hash = view.content_hash()

    device = resolve_device(device)
    model = initial_model(config).to(device)
    optimizer = build_optimizer(model)
    meta = {
        "input_size": policy.output_size,
        "mean": list(policy.mean),
        "std": list(policy.std),
        "view_mode": view_mode,
        "policy": policy.to_dict(),
        "n_train": len(view),
    }

    out = Path(out_dir) if out_dir is not None else None
    start_epoch, step = 0, 0
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        last = out / "checkpoint_last.pt"
        if resume and last.exists():
            state = torch.load(last, map_location="cpu", weights_only=False)
            if state["manifest_hash"] != manifest_hash or state["config"] != config.to_dict():
                raise ProvenanceError(f"{last} belongs to a different run; refusing to resume")
            model.load_state_dict(state["state_dict"])
            optimizer.load_state_dict(state["optimizer"])
            _set_rng_state(model, state["rng"])
            start_epoch, step = state["epoch"], state["step"]
            log.info("resuming from epoch %d (step %d)", start_epoch, step)
        elif not resume:
            for name in ("train_log.jsonl", "crops.jsonl"):
                (out / name).unlink(missing_ok=True)

    dataset = ViewDataset(view, policy, config.seed, view_mode, n_views=model.n_views)
    n_batches = len(dataset) // config.batch_size
    if config.epochs > 0 and n_batches == 0:
        raise ConfigError(f"batch size {config.batch_size} exceeds the {len(dataset)} training images")
    total = n_batches * config.epochs

    model.train()
    for epoch in range(start_epoch, config.epochs):
        dataset.set_epoch(epoch)
        order = derive_rng(config.seed, "order", epoch).permutation(len(dataset))[: n_batches * config.batch_size]
        loader = DataLoader(
            dataset,
            batch_size=config.batch_size,
            sampler=order.tolist(),
            num_workers=workers,
            collate_fn=_collate,
            drop_last=True,
        )
        records = []
        for views, ids in loader:
            lr = lr_at(config.optimizer.lr, config.schedule, step, total, n_batches)
            for group in optimizer.param_groups:
                group["lr"] = lr
            ctx = {"step": step, "lr": lr, "batch_ids": [view.items[i].image_id for i in ids[:8]]}
            loss = train_step(model, optimizer, [v.to(device) for v in views], ctx)
            records.append({"step": step, "epoch": epoch, "lr": lr, "loss": loss})
            if log_crops and out is not None:
                with open(out / "crops.jsonl", "a") as fh:
                    for i in ids:
                        for r in dataset.view_records(i):
                            fh.write(json.dumps({
                                "step": step, "image_id": view.items[i].image_id,
                                "crop_box": list(r.crop_box), "flipped": r.flipped,
                                "poisoned_source": r.poisoned_source,
                            }) + "\n")
            step += 1
        if out is not None:
            with open(out / "train_log.jsonl", "a") as fh:
                fh.writelines(json.dumps(r) + "\n" for r in records)
            tmp = out / "checkpoint_last.pt.tmp"
            torch.save({
                "state_dict": model.state_dict(),
                "optimizer": optimizer.state_dict(),
                "rng": _rng_state(model),
                "epoch": epoch + 1,
                "step": step,
                "manifest_hash": manifest_hash,
                "config": config.to_dict(),
            }, tmp)
            os.replace(tmp, out / "checkpoint_last.pt")
        if records:
            log.info("epoch %d: mean loss %.4f", epoch, sum(r["loss"] for r in records) / len(records))

    model.eval()
    ckpt = EncoderCheckpoint(config.method, config.to_dict(), _snapshot(model), manifest_hash, config.epochs, meta)
    if out is not None:
        ckpt.save(out / "checkpoint.pt")
    return ckpt


def read_train_log(path: str | os.PathLike) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
