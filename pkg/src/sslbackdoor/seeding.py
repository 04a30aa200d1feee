"""Keyed random streams.

Every stochastic choice in the lab draws from a stream derived from a root seed
plus a tuple of keys (image id, stage name, epoch, ...). Nothing depends on the
order in which streams are created, so parallel workers give identical results.
"""
from __future__ import annotations

import hashlib
import os

import numpy as np
import torch


def derive_seed(seed: int, *keys: object) -> int:
    h = hashlib.sha256(str(int(seed)).encode())
    for k in keys:
        h.update(b"\x1f")
        h.update(str(k).encode())
    return int.from_bytes(h.digest()[:8], "little")


def derive_rng(seed: int, *keys: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))


def derive_torch_generator(seed: int, *keys: object) -> torch.Generator:
    g = torch.Generator()
    # torch seeds must fit in a signed 64-bit int
    g.manual_seed(derive_seed(seed, *keys) & 0x7FFF_FFFF_FFFF_FFFF)
    return g


DEVICE_ENV = "SSLBACKDOOR_DEVICE"


def resolve_device(device: str | torch.device | None = None) -> torch.device:
    """Explicit device, else ``$SSLBACKDOOR_DEVICE``, else CPU.

    Random streams always live on the CPU, so a run's sampling decisions do not
    depend on the device; floating-point results on accelerators may still differ
    from CPU runs in the last bits.
    """
    return torch.device(device or os.environ.get(DEVICE_ENV) or "cpu")
