"""PNG (8-bit sRGB) and PFM (linear float) image files."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image

from .geomcore import ImageBuffer


class ImageFileError(RuntimeError):
    """Raised when an image file cannot be decoded."""


def _array(image: ImageBuffer | np.ndarray) -> np.ndarray:
    data = image.data if isinstance(image, ImageBuffer) else np.asarray(image, dtype=np.float64)
    if data.ndim == 2:
        data = data[..., None]
    return data


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)


def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def write_png(path: str | os.PathLike[str], image: ImageBuffer | np.ndarray) -> Path:
    data = _array(image)
    encoded = np.round(linear_to_srgb(data) * 255.0).astype(np.uint8)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    if encoded.shape[2] == 1:
        Image.fromarray(encoded[..., 0], mode="L").save(out)
    else:
        Image.fromarray(encoded[..., :3], mode="RGB").save(out)
    return out


def read_png(path: str | os.PathLike[str]) -> ImageBuffer:
    with Image.open(path) as img:
        data = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return ImageBuffer(srgb_to_linear(data))


def write_pfm(path: str | os.PathLike[str], image: ImageBuffer | np.ndarray) -> Path:
    """Little-endian PFM; 1-channel images use the greyscale ``Pf`` header."""
    data = _array(image)
    channels = data.shape[2]
    if channels not in (1, 3):
        data = data[..., :3]
        channels = 3
    height, width = data.shape[:2]
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("wb") as handle:
        handle.write(b"PF\n" if channels == 3 else b"Pf\n")
        handle.write(f"{width} {height}\n".encode("ascii"))
        handle.write(b"-1.0\n")
        handle.write(np.flipud(data).astype("<f4").tobytes())
    return out


def read_pfm(path: str | os.PathLike[str]) -> ImageBuffer:
    file_path = Path(path)
    if not file_path.exists():
        raise FileNotFoundError(file_path)
    with file_path.open("rb") as handle:
        try:
            kind = handle.readline().strip()
            width, height = (int(v) for v in handle.readline().split())
            scale = float(handle.readline().strip())
        except ValueError as exc:
            raise ImageFileError(f"{file_path}: malformed PFM header") from exc
        if kind not in (b"PF", b"Pf"):
            raise ImageFileError(f"{file_path}: not a PFM file")
        channels = 3 if kind == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        body = handle.read()
    expected = width * height * channels * 4
    if len(body) != expected:
        raise ImageFileError(f"{file_path}: pixel block has {len(body)} bytes, expected {expected}")
    data = np.frombuffer(body, dtype=dtype).reshape(height, width, channels)
    return ImageBuffer(np.flipud(data).astype(np.float64))


def read_image(path: str | os.PathLike[str]) -> ImageBuffer:
    if Path(path).suffix.lower() == ".pfm":
        return read_pfm(path)
    return read_png(path)
