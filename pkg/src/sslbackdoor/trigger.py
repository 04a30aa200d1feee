"""Square patch triggers: seeded synthesis, PNG persistence, and opaque pasting.

A trigger is a random 4x4 RGB image upscaled with bilinear interpolation
(half-pixel centres, edge clamping) to the requested side length. Triggers are
pasted in 8-bit pixel space, before any training-time normalisation.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, FormatError, PlacementError
from .seeding import derive_rng

log = logging.getLogger(__name__)

BASE_RESOLUTION = 4
DEFAULT_TRIGGER_SEED = 0
# 50 px trigger on 224 px images
RELATIVE_TRIGGER_SIDE = 0.22


@dataclass(frozen=True)
class TriggerSpec:
    trigger_id: int
    patch_size: int
    seed: int = DEFAULT_TRIGGER_SEED
    base_resolution: int = BASE_RESOLUTION
    channels: int = 3

    def __post_init__(self):
        if self.base_resolution != BASE_RESOLUTION or self.channels != 3:
            raise ConfigError("triggers are built from 4x4 RGB base images")
        if self.patch_size < self.base_resolution:
            raise ConfigError(
                f"patch_size must be >= {self.base_resolution}, got {self.patch_size}"
            )
        if not 0 <= self.seed < 2**64:
            raise ConfigError("trigger seed must be an unsigned 64-bit integer")


@dataclass(frozen=True, eq=False)
class TriggerImage:
    spec: TriggerSpec
    pixels: np.ndarray  # (patch_size, patch_size, 3) uint8

    def __post_init__(self):
        p = self.spec.patch_size
        if self.pixels.shape != (p, p, 3) or self.pixels.dtype != np.uint8:
            raise FormatError(
                f"trigger pixels must be uint8 of shape {(p, p, 3)}, got "
                f"{self.pixels.dtype} {self.pixels.shape}"
            )
        self.pixels.setflags(write=False)

    @property
    def size(self) -> int:
        return self.spec.patch_size

    def __eq__(self, other):
        if not isinstance(other, TriggerImage):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True)
class PlacementRecord:
    image_id: str
    x: int
    y: int

    def check(self, width: int, height: int, patch_size: int) -> None:
        if not (0 <= self.x <= width - patch_size and 0 <= self.y <= height - patch_size):
            raise PlacementError(
                f"placement ({self.x}, {self.y}) of a {patch_size}px trigger does not fit "
                f"inside {width}x{height} image {self.image_id!r}"
            )


def default_patch_size(width: int, height: int) -> int:
    """Trigger side that keeps the 50/224 footprint ratio, never below 4 px."""
    return max(BASE_RESOLUTION, int(round(RELATIVE_TRIGGER_SIDE * min(width, height))))


def base_image(trigger_id: int, seed: int = DEFAULT_TRIGGER_SEED) -> np.ndarray:
    rng = derive_rng(seed, "trigger", int(trigger_id))
    return rng.integers(0, 256, size=(BASE_RESOLUTION, BASE_RESOLUTION, 3), dtype=np.uint8)


def _axis_weights(n_in: int, n_out: int):
    """Integer source indices and fractional weights (numerators over 2*n_out).

    Half-pixel centres: src = (dst + 0.5) * n_in / n_out - 0.5, clamped to the
    edge. Kept in integers so that exact .5 results round the same way everywhere.
    """
    den = 2 * n_out
    num = (2 * np.arange(n_out, dtype=np.int64) + 1) * n_in - n_out
    num = np.clip(num, 0, (n_in - 1) * den)
    lo = num // den
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, num - lo * den, den


def bilinear_resize(image: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    """Resize an HxWxC uint8 image with bilinear interpolation (align_corners=False).

    Computed exactly in integers, rounded half to even.
    """
    out_h, out_w = (size, size) if isinstance(size, int) else size
    h, w = image.shape[:2]
    if (out_h, out_w) == (h, w):
        return image.copy()
    img = image.astype(np.int64)
    ylo, yhi, fy, dy = _axis_weights(h, out_h)
    xlo, xhi, fx, dx = _axis_weights(w, out_w)
    rows = img[ylo] * (dy - fy)[:, None, None] + img[yhi] * fy[:, None, None]
    acc = rows[:, xlo] * (dx - fx)[None, :, None] + rows[:, xhi] * fx[None, :, None]
    den = dy * dx
    q, r = np.divmod(acc, den)
    up = (2 * r > den) | ((2 * r == den) & (q % 2 == 1))
    return np.clip(q + up, 0, 255).astype(np.uint8)


def generate_trigger(spec: TriggerSpec) -> TriggerImage:
    base = base_image(spec.trigger_id, spec.seed)
    return TriggerImage(spec, bilinear_resize(base, spec.patch_size))


def load_trigger(path: str | os.PathLike, trigger_id: int, patch_size: int | None = None) -> TriggerImage:
    """Load an externally supplied trigger patch verbatim.

    With ``patch_size`` given, the file must already be that size; no resampling
    is applied to external patches.
    """
    try:
        with Image.open(path) as im:
            pixels = np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read trigger file {path}: {exc}") from exc
    if pixels.shape[0] != pixels.shape[1]:
        raise FormatError(f"trigger file {path} is not square: {pixels.shape[:2]}")
    if patch_size is not None and pixels.shape[0] != patch_size:
        raise FormatError(f"trigger file {path} is {pixels.shape[0]}px, expected {patch_size}px")
    return TriggerImage(TriggerSpec(trigger_id, pixels.shape[0]), pixels)


def save_trigger(trigger: TriggerImage, directory: str | os.PathLike) -> tuple[Path, Path]:
    """Write ``trigger_<id>_<size>.png`` and ``trigger_<id>_base.png``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tid = trigger.spec.trigger_id
    patch = directory / f"trigger_{tid}_{trigger.size}.png"
    base = directory / f"trigger_{tid}_base.png"
    Image.fromarray(np.ascontiguousarray(trigger.pixels)).save(patch)
    Image.fromarray(base_image(tid, trigger.spec.seed)).save(base)
    return patch, base


def sample_location(image_w: int, image_h: int, patch_size: int, rng: np.random.Generator) -> tuple[int, int]:
    if image_w < patch_size or image_h < patch_size:
        raise PlacementError(
            f"a {patch_size}px trigger cannot be placed inside a {image_w}x{image_h} image"
        )
    x = int(rng.integers(0, image_w - patch_size + 1))
    y = int(rng.integers(0, image_h - patch_size + 1))
    return x, y


def _check_image(image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise FormatError(f"expected an HxWx3 RGB image, got shape {image.shape}")
    if image.dtype != np.uint8:
        raise FormatError(f"expected uint8 pixels, got {image.dtype}")


def paste_trigger(image: np.ndarray, trigger: TriggerImage, placement: PlacementRecord) -> np.ndarray:
    _check_image(image)
    h, w = image.shape[:2]
    p = trigger.size
    placement.check(w, h, p)
    out = image.copy()
    out[placement.y:placement.y + p, placement.x:placement.x + p] = trigger.pixels
    return out


def extract_patch(image: np.ndarray, placement: PlacementRecord, patch_size: int) -> np.ndarray:
    _check_image(image)
    placement.check(image.shape[1], image.shape[0], patch_size)
    return image[placement.y:placement.y + patch_size, placement.x:placement.x + patch_size].copy()


def unpaste_trigger(image: np.ndarray, saved: np.ndarray, placement: PlacementRecord) -> np.ndarray:
    """Restore the rectangle previously saved with :func:`extract_patch`."""
    p = saved.shape[0]
    out = image.copy()
    placement.check(image.shape[1], image.shape[0], p)
    out[placement.y:placement.y + p, placement.x:placement.x + p] = saved
    return out


def patch_overlaps(placement: PlacementRecord, patch_size: int, box: tuple[int, int, int, int]) -> bool:
    """Whether a (top, left, height, width) box intersects the trigger rectangle."""
    top, left, bh, bw = box
    return (
        placement.x < left + bw
        and left < placement.x + patch_size
        and placement.y < top + bh
        and top < placement.y + patch_size
    )

