"""Per-sample view generation with explicit, loggable randomness."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torchvision.transforms.v2.functional as TF

from ..errors import DataError
from .config import VIEW_MODES, AugmentationPolicy


@dataclass(frozen=True)
class ViewRecord:
    # (top, left, height, width) in source pixels
    crop_box: tuple[int, int, int, int]
    flipped: bool
    # True when the view was drawn from the (possibly poisoned) file, False for the clean twin
    poisoned_source: bool


def to_tensor(image: np.ndarray | torch.Tensor) -> torch.Tensor:
    """HxWx3 uint8 -> 3xHxW float in [0, 1]."""
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(np.ascontiguousarray(image))
    if image.dtype != torch.uint8 or image.dim() != 3 or image.shape[-1] != 3:
        raise DataError(f"expected an HxWx3 uint8 image, got {tuple(image.shape)} {image.dtype}")
    return image.permute(2, 0, 1).float().div_(255.0)


def _uniform(g: torch.Generator, lo: float, hi: float) -> float:
    return lo + (hi - lo) * torch.rand((), generator=g).item()


def sample_crop(height: int, width: int, scale, ratio, g: torch.Generator) -> tuple[int, int, int, int]:
    """Random-resized-crop box, same rejection scheme as torchvision."""
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target_area = area * _uniform(g, *scale)
        aspect = math.exp(_uniform(g, *log_ratio))
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(torch.randint(0, height - h + 1, (), generator=g))
            left = int(torch.randint(0, width - w + 1, (), generator=g))
            return top, left, h, w
    in_ratio = width / height
    if in_ratio < min(ratio):
        w, h = width, int(round(width / min(ratio)))
    elif in_ratio > max(ratio):
        h, w = height, int(round(height * max(ratio)))
    else:
        w, h = width, height
    return (height - h) // 2, (width - w) // 2, h, w


def _color_jitter(x: torch.Tensor, strengths, g: torch.Generator) -> torch.Tensor:
    b, c, s, h = strengths
    order = torch.randperm(4, generator=g).tolist()
    for op in order:
        if op == 0 and b > 0:
            x = TF.adjust_brightness(x, _uniform(g, max(0.0, 1 - b), 1 + b))
        elif op == 1 and c > 0:
            x = TF.adjust_contrast(x, _uniform(g, max(0.0, 1 - c), 1 + c))
        elif op == 2 and s > 0:
            x = TF.adjust_saturation(x, _uniform(g, max(0.0, 1 - s), 1 + s))
        elif op == 3 and h > 0:
            x = TF.adjust_hue(x, _uniform(g, -h, h))
    return x


def augment_view(image: torch.Tensor, policy: AugmentationPolicy, g: torch.Generator, poisoned: bool = False) -> tuple[torch.Tensor, ViewRecord]:
    """One random view of a 3xHxW float image."""
    _, height, width = image.shape
    box = sample_crop(height, width, policy.crop_scale_range, policy.crop_ratio_range, g)
    top, left, h, w = box
    size = policy.output_size
    if (top, left, h, w) == (0, 0, height, width) and (h, w) == (size, size):
        x = image
    else:
        x = TF.resized_crop(image, top, left, h, w, [size, size], antialias=True)
    flipped = torch.rand((), generator=g).item() < policy.horizontal_flip_prob
    if flipped:
        x = TF.horizontal_flip(x)
    if torch.rand((), generator=g).item() < policy.color_jitter_prob:
        x = _color_jitter(x, policy.color_jitter, g)
    if torch.rand((), generator=g).item() < policy.grayscale_prob:
        x = TF.rgb_to_grayscale(x, num_output_channels=3)
    if torch.rand((), generator=g).item() < policy.blur_prob:
        k = max(3, int(0.1 * size) // 2 * 2 + 1)
        sigma = _uniform(g, *policy.blur_sigma)
        x = TF.gaussian_blur(x, [k, k], [sigma, sigma])
    if policy.mean != (0.0, 0.0, 0.0) or policy.std != (1.0, 1.0, 1.0):
        x = TF.normalize(x, list(policy.mean), list(policy.std))
    return x.contiguous(), ViewRecord(box, flipped, poisoned)


def augment_pair(
    image: np.ndarray | torch.Tensor,
    policy: AugmentationPolicy,
    g: torch.Generator,
    view_mode: str = "standard",
    clean_twin: np.ndarray | torch.Tensor | None = None,
    records: list | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Two views of an image.

    ``standard`` and ``random_poison_both_views`` augment ``image`` twice. In
    ``one_view_poisoned`` a fair coin decides which branch sees ``image`` (the
    poisoned file); the other branch augments ``clean_twin``. When ``records`` is
    a list, the two :class:`ViewRecord` objects are appended to it.
    """
    if view_mode not in VIEW_MODES:
        raise DataError(f"unknown view mode {view_mode!r}")
    x = image if isinstance(image, torch.Tensor) and image.dtype != torch.uint8 else to_tensor(image)
    if view_mode == "one_view_poisoned":
        if clean_twin is None:
            raise DataError("one_view_poisoned needs the clean twin of the poisoned image")
        twin = clean_twin if isinstance(clean_twin, torch.Tensor) and clean_twin.dtype != torch.uint8 else to_tensor(clean_twin)
        first_poisoned = torch.rand((), generator=g).item() < 0.5
        sources = (x, twin) if first_poisoned else (twin, x)
        flags = (first_poisoned, not first_poisoned)
    else:
        sources, flags = (x, x), (True, True)
    v1, r1 = augment_view(sources[0], policy, g, flags[0])
    v2, r2 = augment_view(sources[1], policy, g, flags[1])
    if records is not None:
        records.extend([r1, r2])
    return v1, v2


def center_crop_view(image: np.ndarray | torch.Tensor, size: int, mean, std) -> torch.Tensor:
    """Deterministic evaluation preprocessing: shorter side to ``size``, centre crop, normalise."""
    x = image if isinstance(image, torch.Tensor) and image.dtype != torch.uint8 else to_tensor(image)
    _, h, w = x.shape
    if min(h, w) != size:
        scale = size / min(h, w)
        x = TF.resize(x, [max(size, round(h * scale)), max(size, round(w * scale))], antialias=True)
    x = TF.center_crop(x, [size, size])
    if tuple(mean) != (0.0, 0.0, 0.0) or tuple(std) != (1.0, 1.0, 1.0):
        x = TF.normalize(x, list(mean), list(std))
    return x.contiguous()
