"""8-bit grayscale PGM (P5) images and sample grids"""

from __future__ import annotations

import io
import logging
import math
from collections.abc import Sequence
from pathlib import Path

import numpy as np
import numpy.typing as npt
from PIL import Image

from errors import ContractError, MissingArtifactError

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

Gray = npt.NDArray[np.uint8]


def to_uint8(image: npt.NDArray[np.floating] | Gray) -> Gray:
    """Round and clamp to [0, 255]"""
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def encode_pgm(image: Gray) -> bytes:
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ContractError(f"PGM needs a 2-D uint8 image, got {image.dtype} {image.shape}")
    buffer = io.BytesIO()
    Image.fromarray(image).save(buffer, format="PPM")
    return buffer.getvalue()


def write_pgm(path: str | Path, image: Gray) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(encode_pgm(image))
    return target


def read_pgm(path: str | Path) -> Gray:
    source = Path(path)
    if not source.is_file():
        raise MissingArtifactError([str(source)], "image")
    with Image.open(source) as img:
        if img.mode != "L":
            raise ContractError(f"{source}: expected 8-bit grayscale, got mode {img.mode}")
        return np.asarray(img, dtype=np.uint8).copy()


def from_unit_range(images: npt.NDArray[np.floating]) -> Gray:
    """Map [-1, 1] values to gray levels"""
    return to_uint8((np.clip(images, -1.0, 1.0) + 1.0) * 127.5)


def to_unit_range(images: Gray | npt.NDArray[np.floating]) -> npt.NDArray[np.float64]:
    return np.asarray(images, dtype=np.float64) / 127.5 - 1.0


def tile_grid(images: Sequence[Gray], columns: int | None = None, pad: int = 2) -> Gray:
    """Arrange equally sized images on a grid separated by black gutters"""
    if not images:
        raise ContractError("tile_grid needs at least one image")
    h, w = images[0].shape
    cols = columns or math.ceil(math.sqrt(len(images)))
    rows = math.ceil(len(images) / cols)
    grid = np.zeros((rows * (h + pad) + pad, cols * (w + pad) + pad), dtype=np.uint8)
    for index, image in enumerate(images):
        if image.shape != (h, w):
            raise ContractError(f"tile_grid image {index} is {image.shape}, expected {(h, w)}")
        r, c = divmod(index, cols)
        top, left = pad + r * (h + pad), pad + c * (w + pad)
        grid[top : top + h, left : left + w] = image
    return grid
