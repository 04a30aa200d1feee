from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image
from scipy.stats import chisquare

from sslbackdoor.errors import ConfigError, PlacementError
from sslbackdoor.trigger import (
    PlacementRecord,
    TriggerImage,
    TriggerSpec,
    base_image,
    bilinear_resize,
    default_patch_size,
    extract_patch,
    generate_trigger,
    load_trigger,
    paste_trigger,
    sample_location,
    save_trigger,
    unpaste_trigger,
)

GOLDEN = Path(__file__).parent / "data" / "trigger_10_50.png"


def torch_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    # independent resampler: torch's half-pixel bilinear, no antialiasing
    x = torch.from_numpy(image).permute(2, 0, 1)[None].double()
    y = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False, antialias=False)
    return y[0].permute(1, 2, 0).round().clamp(0, 255).to(torch.uint8).numpy()


def exact_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    # rational-arithmetic oracle, one output pixel at a time, round half to even
    n = image.shape[0]

    def taps(d):
        src = min(max((Fraction(2 * d + 1, 2) * n / size) - Fraction(1, 2), Fraction(0)), Fraction(n - 1))
        lo = int(src)
        return lo, min(lo + 1, n - 1), src - lo

    out = np.zeros((size, size, 3), np.uint8)
    for i in range(size):
        y0, y1, fy = taps(i)
        for j in range(size):
            x0, x1, fx = taps(j)
            for c in range(3):
                v = ((1 - fy) * ((1 - fx) * int(image[y0, x0, c]) + fx * int(image[y0, x1, c]))
                     + fy * ((1 - fx) * int(image[y1, x0, c]) + fx * int(image[y1, x1, c])))
                out[i, j, c] = round(v)
    return out


def test_patch_size_4_is_raw_base():
    t = generate_trigger(TriggerSpec(10, 4))
    assert np.array_equal(t.pixels, base_image(10))


@pytest.mark.parametrize("size", [4, 5, 7, 13, 50])
def test_constant_base_stays_constant(size):
    base = np.full((4, 4, 3), 87, np.uint8)
    assert (bilinear_resize(base, size) == 87).all()


def test_golden_trigger_10_50():
    t = generate_trigger(TriggerSpec(10, 50))
    golden = np.asarray(Image.open(GOLDEN).convert("RGB"))
    assert np.array_equal(t.pixels, golden)


@pytest.mark.parametrize("tid", [0, 10, 11, 19])
@pytest.mark.parametrize("size", [5, 7, 8, 23, 50])
def test_resampler_matches_exact_oracle(tid, size):
    base = base_image(tid)
    assert np.array_equal(bilinear_resize(base, size), exact_bilinear(base, size))


@pytest.mark.parametrize("tid", [0, 10, 19])
@pytest.mark.parametrize("size", [7, 50])
def test_resampler_agrees_with_torch(tid, size):
    base = base_image(tid)
    # torch rounds in floating point, so exact .5 ties may land one level apart
    diff = np.abs(bilinear_resize(base, size).astype(int) - torch_bilinear(base, size).astype(int))
    assert diff.max() <= 1
    assert (diff > 0).mean() < 0.05


def test_distinct_ids_give_distinct_triggers():
    assert not np.array_equal(base_image(10), base_image(11))
    assert generate_trigger(TriggerSpec(10, 7)) == generate_trigger(TriggerSpec(10, 7))


def test_spec_validation():
    with pytest.raises(ConfigError):
        TriggerSpec(1, 3)
    with pytest.raises(ConfigError):
        TriggerSpec(1, 8, base_resolution=5)


def test_default_patch_size_keeps_ratio():
    assert default_patch_size(224, 224) == 49
    assert default_patch_size(32, 32) == 7
    assert default_patch_size(10, 10) == 4


def test_save_and_load_round_trip(tmp_path):
    t = generate_trigger(TriggerSpec(12, 9))
    patch, base = save_trigger(t, tmp_path)
    assert patch.name == "trigger_12_9.png" and base.name == "trigger_12_base.png"
    assert np.array_equal(load_trigger(patch, 12, 9).pixels, t.pixels)
    with pytest.raises(ValueError):
        load_trigger(patch, 12, 10)


def test_single_placement():
    rng = np.random.default_rng(0)
    assert {sample_location(50, 50, 50, rng) for _ in range(20)} == {(0, 0)}


def test_placement_too_small():
    with pytest.raises(PlacementError):
        sample_location(32, 32, 50, np.random.default_rng(0))


def test_placement_uniform():
    rng = np.random.default_rng(123)
    counts = np.zeros((3, 3), int)
    for _ in range(10_000):
        x, y = sample_location(52, 52, 50, rng)
        counts[y, x] += 1
    assert chisquare(counts.ravel()).pvalue > 0.01


def test_paste_at_origin():
    img = np.random.default_rng(0).integers(0, 256, (32, 32, 3), dtype=np.uint8)
    t = generate_trigger(TriggerSpec(10, 7))
    out = paste_trigger(img, t, PlacementRecord("a", 0, 0))
    assert np.array_equal(out[:7, :7], t.pixels)
    mask = np.ones((32, 32), bool)
    mask[:7, :7] = False
    assert np.array_equal(out[mask], img[mask])


def test_paste_rejects_overhang():
    img = np.zeros((32, 32, 3), np.uint8)
    with pytest.raises(PlacementError):
        paste_trigger(img, generate_trigger(TriggerSpec(1, 7)), PlacementRecord("a", 26, 0))


@settings(max_examples=60, deadline=None)
@given(
    h=st.integers(8, 40), w=st.integers(8, 40), p=st.integers(4, 8),
    seed=st.integers(0, 2**32 - 1), tid=st.integers(0, 50),
)
def test_round_trip_properties(h, w, p, seed, tid):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
    t = generate_trigger(TriggerSpec(tid, p))
    x, y = sample_location(w, h, p, rng)
    pl = PlacementRecord("i", x, y)
    saved = extract_patch(img, pl, p)
    out = paste_trigger(img, t, pl)
    assert np.array_equal(extract_patch(out, pl, p), t.pixels)
    assert np.array_equal(paste_trigger(out, t, pl), out)
    assert (out != img).any(axis=2).sum() <= p * p
    assert np.array_equal(unpaste_trigger(out, saved, pl), img)


def test_trigger_pixels_read_only():
    t = generate_trigger(TriggerSpec(3, 5))
    with pytest.raises(ValueError):
        t.pixels[0, 0, 0] = 1
    with pytest.raises(ValueError):
        TriggerImage(TriggerSpec(3, 5), np.zeros((4, 4, 3), np.uint8))
