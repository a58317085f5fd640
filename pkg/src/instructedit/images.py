"""Image codec, resize and validation helpers.

Images travel as uint8 HxWx3 arrays on disk and as float tensors in [-1, 1]
(N, 3, H, W) inside the model.
"""

from __future__ import annotations

import io
import math
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .exceptions import DecodeError, DegenerateSizeError, ShapeMismatchError


def encode_png(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(check_image(arr), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(f"cannot decode image: {exc}") from exc


def load_image(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DecodeError(f"cannot read {path}: {exc}") from exc
    return decode_png(data)


def save_png(arr: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_png(arr))
    return path


def check_image(arr) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeMismatchError(f"expected HxWx3 image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise ShapeMismatchError(f"expected uint8 image, got {arr.dtype}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DegenerateSizeError("empty image")
    return arr


def to_tensor(arr: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """uint8 HxWx3 (or a stack of them) to float (N, 3, H, W) in [-1, 1]."""
    arr = np.asarray(arr)
    if arr.ndim == 3:
        arr = arr[None]
    t = torch.from_numpy(arr.astype(np.float64) / 127.5 - 1.0).permute(0, 3, 1, 2)
    return t.to(dtype).contiguous()


def from_tensor(t: torch.Tensor) -> np.ndarray:
    """Float (N, 3, H, W) in [-1, 1] to uint8 (N, H, W, 3)."""
    x = t.detach().to(torch.float64).clamp(-1.0, 1.0)
    x = torch.round((x + 1.0) * 127.5).to(torch.uint8)
    return x.permute(0, 2, 3, 1).numpy()


def shorter_side_size(height: int, width: int, target: int) -> tuple[int, int]:
    """(height, width) after aspect-preserving resize of the shorter side."""
    if height < 1 or width < 1:
        raise DegenerateSizeError("empty image")
    if height <= width:
        return target, max(1, int(math.floor(width * target / height + 0.5)))
    return max(1, int(math.floor(height * target / width + 0.5))), target


def round_to_multiple(size: tuple[int, int], multiple: int) -> tuple[int, int]:
    return tuple(max(multiple, multiple * int(round(s / multiple))) for s in size)


def resize(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize to (height, width)."""
    arr = check_image(arr)
    if arr.shape[:2] == tuple(size):
        return arr
    im = Image.fromarray(arr, mode="RGB").resize((size[1], size[0]), Image.BILINEAR)
    return np.asarray(im, dtype=np.uint8).copy()
