"""Momentum (EMA) updates and FIFO embedding queues."""
from __future__ import annotations

import torch
from torch import nn

from ..errors import ConfigError


@torch.no_grad()
def ema_update(target: nn.Module, online: nn.Module, momentum: float) -> None:
    """theta_target <- m * theta_target + (1 - m) * theta_online, parameters only."""
    if not 0.0 <= momentum <= 1.0:
        raise ConfigError(f"EMA momentum must lie in [0, 1], got {momentum}")
    for pt, po in zip(target.parameters(), online.parameters()):
        if momentum == 1.0:
            continue
        if momentum == 0.0:
            pt.copy_(po)
        else:
            pt.mul_(momentum).add_(po, alpha=1.0 - momentum)


class FeatureQueue(nn.Module):
    """Fixed-size ring buffer of unit vectors, initialised with normalised Gaussians."""

    def __init__(self, size: int, dim: int, generator: torch.Generator | None = None):
        super().__init__()
        if size <= 0 or dim <= 0:
            raise ConfigError("queue size and dimension must be positive")
        bank = torch.randn(size, dim, generator=generator)
        self.register_buffer("bank", nn.functional.normalize(bank, dim=1))
        self.register_buffer("ptr", torch.zeros((), dtype=torch.long))

    @property
    def size(self) -> int:
        return self.bank.shape[0]

    @torch.no_grad()
    def enqueue(self, keys: torch.Tensor) -> None:
        n = keys.shape[0]
        if self.size % n:
            raise ConfigError(f"batch of {n} keys does not divide queue size {self.size}")
        p = int(self.ptr)
        self.bank[p:p + n] = keys.detach()
        self.ptr.fill_((p + n) % self.size)

    def ordered(self) -> torch.Tensor:
        """Rows from oldest to newest."""
        p = int(self.ptr)
        return torch.cat([self.bank[p:], self.bank[:p]])
