"""Jigsaw puzzle helpers: maximal-Hamming permutation sets and 3x3 tiling."""
from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ConfigError
from ..seeding import derive_rng

GRID = 3
N_TILES = GRID * GRID


@dataclass(frozen=True, eq=False)
class PermutationSet:
    perms: np.ndarray  # (P, 9) int64, row i maps grid slot -> tile index
    # smallest Hamming distance of any selected permutation to those before it
    min_distance: int

    def __len__(self) -> int:
        return len(self.perms)


@functools.lru_cache(maxsize=1)
def _all_permutations() -> np.ndarray:
    return np.array(list(itertools.permutations(range(N_TILES))), dtype=np.uint8)


@functools.lru_cache(maxsize=8)
def generate_permutations(size: int, seed: int = 0) -> PermutationSet:
    """Greedy max-min Hamming selection over all 9! orderings.

    The first permutation is drawn at random; each next one maximises its
    minimum distance to the already selected set (lowest index on ties).
    """
    pool = _all_permutations()
    if not 1 <= size <= len(pool):
        raise ConfigError(f"permutation set size must lie in [1, {len(pool)}], got {size}")
    rng = derive_rng(seed, "jigsaw-permutations")
    first = int(rng.integers(len(pool)))
    chosen = [first]
    min_dist = (pool != pool[first]).sum(axis=1).astype(np.int16)
    bound = N_TILES
    for _ in range(size - 1):
        nxt = int(min_dist.argmax())
        bound = min(bound, int(min_dist[nxt]))
        chosen.append(nxt)
        np.minimum(min_dist, (pool != pool[nxt]).sum(axis=1), out=min_dist)
    return PermutationSet(pool[chosen].astype(np.int64), bound)


def split_tiles(x: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, 9, C, T, T) in row-major grid order.

    Images whose side is not a multiple of 3 are first resized up to the next
    multiple.
    """
    b, c, h, w = x.shape
    side = max(h, w)
    side = -(-side // GRID) * GRID
    if (h, w) != (side, side):
        x = F.interpolate(x, size=(side, side), mode="bilinear", align_corners=False)
    t = side // GRID
    tiles = x.reshape(b, c, GRID, t, GRID, t).permute(0, 2, 4, 1, 3, 5)
    return tiles.reshape(b, N_TILES, c, t, t)


def assemble_tiles(tiles: torch.Tensor) -> torch.Tensor:
    b, n, c, t, _ = tiles.shape
    x = tiles.reshape(b, GRID, GRID, c, t, t).permute(0, 3, 1, 4, 2, 5)
    return x.reshape(b, c, GRID * t, GRID * t)


def shuffle_tiles(tiles: torch.Tensor, perms: torch.Tensor) -> torch.Tensor:
    """Slot ``i`` of sample ``b`` receives tile ``perms[b, i]``."""
    idx = perms.view(perms.shape[0], N_TILES, 1, 1, 1).expand_as(tiles)
    return tiles.gather(1, idx)


def jitter_tiles(tiles: torch.Tensor, crop: int, g: torch.Generator) -> torch.Tensor:
    """Random ``crop``-pixel square from each tile, which hides edge continuity."""
    b, n, c, t, _ = tiles.shape
    if crop >= t:
        return tiles
    offs = torch.randint(0, t - crop + 1, (b, n, 2), generator=g)
    out = tiles.new_empty((b, n, c, crop, crop))
    for i in range(b):
        for j in range(n):
            y, x = offs[i, j].tolist()
            out[i, j] = tiles[i, j, :, y:y + crop, x:x + crop]
    return out
