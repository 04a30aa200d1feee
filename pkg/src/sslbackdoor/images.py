from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import DataError


def read_rgb(path: str | os.PathLike) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def read_many(paths: Sequence[str | os.PathLike], workers: int = 1) -> list[np.ndarray]:
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(read_rgb, paths))
    return [read_rgb(p) for p in paths]
