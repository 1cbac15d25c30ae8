"""Atomic file writers and image readers."""
from __future__ import annotations

import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image, PngImagePlugin

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp")


def atomic_write_bytes(path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_json(path, payload) -> Path:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    return atomic_write_bytes(path, text.encode())


def write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode())


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_gray(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_image(pixels: np.ndarray, suffix: str = ".png", metadata: dict | None = None) -> bytes:
    """Serialize a [0, 1] gray or RGB array in the format implied by ``suffix``."""
    im = Image.fromarray(to_uint8(pixels))
    buf = io.BytesIO()
    suffix = suffix.lower()
    if suffix == ".png":
        info = None
        if metadata:
            info = PngImagePlugin.PngInfo()
            for key, value in metadata.items():
                info.add_text(key, value if isinstance(value, str) else json.dumps(value, sort_keys=True))
        im.save(buf, format="PNG", pnginfo=info)
    elif suffix in (".jpg", ".jpeg"):
        im.save(buf, format="JPEG", quality=95)
    elif suffix == ".bmp":
        im.save(buf, format="BMP")
    else:
        raise ValueError(f"unsupported image suffix {suffix!r}")
    return buf.getvalue()


def write_image(path, pixels: np.ndarray, metadata: dict | None = None) -> Path:
    path = Path(path)
    return atomic_write_bytes(path, encode_image(pixels, path.suffix, metadata))


def png_text(path) -> dict:
    with Image.open(path) as im:
        return dict(getattr(im, "text", {}))
