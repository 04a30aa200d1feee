"""Self-supervised methods as modules with a uniform training-step protocol.

Each method exposes ``compute_loss(*views)`` and ``after_step()``. The generic
:func:`train_step` runs loss, backward, optimizer step, then ``after_step``
(momentum update and queue/bank refresh for the methods that keep one).
"""
from __future__ import annotations

import copy
import math

import torch
from torch import nn
import torch.nn.functional as F

from ..errors import ConfigError, TrainingDivergence
from ..seeding import derive_torch_generator
from .backbone import TAPS, ResNet18, mlp
from .config import MethodConfig
from .jigsaw import N_TILES, generate_permutations, jitter_tiles, shuffle_tiles, split_tiles
from .losses import byol_loss, info_nce_loss, msf_loss, safe_normalize
from .memory import FeatureQueue, ema_update


class SSLMethod(nn.Module):
    n_views = 2

    def __init__(self, config: MethodConfig):
        super().__init__()
        self.config = config
        self.backbone = ResNet18(config.backbone_width, config.stem, config.bn_splits)

    @property
    def tap(self) -> str:
        return TAPS[self.config.method]

    def compute_loss(self, *views: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def after_step(self) -> None:
        pass

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Unit-norm embedding used as the distillation target."""
        return F.normalize(self.backbone(x), dim=1)


class _OnlineTargetMethod(SSLMethod):
    """Shared structure of the methods with an EMA target network."""

    def __init__(self, config: MethodConfig, predictor: bool):
        super().__init__(config)
        d = self.backbone.out_dim
        self.projector = mlp(d, config.hidden_dim, config.embedding_dim, batch_norm=predictor)
        self.predictor = mlp(config.embedding_dim, config.hidden_dim, config.embedding_dim) if predictor else None
        self.target = copy.deepcopy(nn.Sequential(self.backbone, self.projector))
        for p in self.target.parameters():
            p.requires_grad = False
        self.momentum = config.ema_momentum

    def online(self, x: torch.Tensor) -> torch.Tensor:
        return self.projector(self.backbone(x))

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.online(x), dim=1)

    def online_network(self) -> nn.Module:
        return nn.Sequential(self.backbone, self.projector)

    def after_step(self) -> None:
        ema_update(self.target, self.online_network(), self.momentum)


class MoCoV2(_OnlineTargetMethod):
    def __init__(self, config: MethodConfig):
        super().__init__(config, predictor=False)
        g = derive_torch_generator(config.seed, "queue-init")
        self.queue = FeatureQueue(config.queue_size, config.embedding_dim, g)
        self._pending: torch.Tensor | None = None

    def compute_loss(self, v1, v2):
        q = F.normalize(self.online(v1), dim=1)
        with torch.no_grad():
            k = F.normalize(self.target(v2), dim=1)
        loss = info_nce_loss(q, k, self.queue.bank.clone(), self.config.temperature)
        self._pending = k
        return loss

    def after_step(self) -> None:
        super().after_step()
        if self._pending is not None:
            self.queue.enqueue(self._pending)
            self._pending = None


class BYOL(_OnlineTargetMethod):
    def __init__(self, config: MethodConfig):
        super().__init__(config, predictor=True)

    def compute_loss(self, v1, v2):
        p1 = self.predictor(self.online(v1))
        p2 = self.predictor(self.online(v2))
        with torch.no_grad():
            z1, z2 = self.target(v1), self.target(v2)
        return byol_loss(p1, z2, p2, z1)


class MSF(_OnlineTargetMethod):
    def __init__(self, config: MethodConfig):
        super().__init__(config, predictor=True)
        g = derive_torch_generator(config.seed, "bank-init")
        self.bank = FeatureQueue(config.memory_bank_size, config.embedding_dim, g)
        self._pending: torch.Tensor | None = None

    def compute_loss(self, v1, v2):
        q = safe_normalize(self.predictor(self.online(v1)), "online query")
        with torch.no_grad():
            u = F.normalize(self.target(v2), dim=1)
        loss = msf_loss(q, u, self.bank.bank.clone(), self.config.nn_count)
        self._pending = u
        return loss

    def after_step(self) -> None:
        super().after_step()
        if self._pending is not None:
            self.bank.enqueue(self._pending)
            self._pending = None


def rotate(x: torch.Tensor, quarter_turns: int) -> torch.Tensor:
    """Rotate (..., H, W) images counter-clockwise by ``quarter_turns`` x 90 degrees."""
    return torch.rot90(x, quarter_turns % 4, dims=(-2, -1))


def rotation_batch(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """All four rotations of every image, with labels 0..3 (0, 90, 180, 270 degrees)."""
    xs = torch.cat([rotate(x, k) for k in range(4)])
    ys = torch.arange(4, device=x.device).repeat_interleave(x.shape[0])
    return xs, ys


class RotNet(SSLMethod):
    n_views = 1

    def __init__(self, config: MethodConfig):
        super().__init__(config)
        self.head = nn.Linear(self.backbone.out_dim, 4)

    def compute_loss(self, x):
        xs, ys = rotation_batch(x)
        return F.cross_entropy(self.head(self.backbone(xs)), ys)


class Jigsaw(SSLMethod):
    n_views = 1

    def __init__(self, config: MethodConfig):
        super().__init__(config)
        perms = generate_permutations(config.permutation_set_size, config.seed)
        self.register_buffer("permutations", torch.from_numpy(perms.perms))
        self.permutation_min_distance = perms.min_distance
        d = self.backbone.out_dim
        self.tile_fc = nn.Sequential(nn.Linear(d, d), nn.ReLU(inplace=True))
        self.head = nn.Sequential(
            nn.Linear(N_TILES * d, config.hidden_dim),
            nn.ReLU(inplace=True),
            nn.Linear(config.hidden_dim, config.permutation_set_size),
        )
        self._gen = derive_torch_generator(config.seed, "jigsaw-sampling")

    def logits(self, tiles: torch.Tensor) -> torch.Tensor:
        b = tiles.shape[0]
        feats = self.tile_fc(self.backbone(tiles.flatten(0, 1)))
        return self.head(feats.view(b, -1))

    def compute_loss(self, x):
        tiles = split_tiles(x)
        t = tiles.shape[-1]
        tiles = jitter_tiles(tiles, max(1, math.ceil(0.85 * t)), self._gen)
        labels = torch.randint(0, len(self.permutations), (x.shape[0],), generator=self._gen)
        labels = labels.to(x.device)
        shuffled = shuffle_tiles(tiles, self.permutations[labels])
        return F.cross_entropy(self.logits(shuffled), labels)


_REGISTRY = {"moco_v2": MoCoV2, "byol": BYOL, "msf": MSF, "rotnet": RotNet, "jigsaw": Jigsaw}


def build_method(config: MethodConfig) -> SSLMethod:
    try:
        cls = _REGISTRY[config.method]
    except KeyError:
        raise ConfigError(f"unknown method {config.method!r}") from None
    return cls(config)


def build_optimizer(model: SSLMethod) -> torch.optim.Optimizer:
    opt = model.config.optimizer
    params = model.trainable_parameters()
    if opt.kind == "adam":
        return torch.optim.Adam(params, lr=opt.lr, weight_decay=opt.weight_decay)
    return torch.optim.SGD(
        params, lr=opt.lr, momentum=opt.momentum, weight_decay=opt.weight_decay, nesterov=opt.nesterov
    )


def train_step(model: SSLMethod, optimizer: torch.optim.Optimizer, views, context: dict | None = None) -> float:
    """One optimisation step; raises :class:`TrainingDivergence` on a non-finite loss."""
    loss = model.compute_loss(*views)
    if not torch.isfinite(loss):
        ctx = context or {}
        raise TrainingDivergence(
            f"non-finite loss {loss.item()} at step {ctx.get('step')} "
            f"(lr={ctx.get('lr')}, batch ids={ctx.get('batch_ids')})"
        )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    model.after_step()
    return loss.item()
