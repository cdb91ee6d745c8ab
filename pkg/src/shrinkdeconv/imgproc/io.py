"""Image and kernel file formats.

* PNG: 8-bit grayscale or RGB, mapped to [0, 1].
* PFM: little-endian float32, ``Pf`` (gray) or ``PF`` (RGB), rows stored
  bottom-to-top as the format requires.
* Kernel text: first line ``h w``, then ``h`` rows of ``w`` floats.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .degrade import KernelError, validate_kernel


class ImageFormatError(ValueError):
    pass


def read_image(path) -> np.ndarray:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pfm":
        return read_pfm(path)
    with PILImage.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
            return arr
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if "A" in im.mode or im.mode in ("P", "CMYK") else "L")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr


def write_image(path, x: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        write_pfm(path, x)
        return
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3 and x.shape[2] == 1:
        x = x[..., 0]
    q = np.clip(np.rint(np.clip(x, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(q).save(path)


def write_pfm(path, x: np.ndarray) -> None:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 2:
        tag = b"Pf"
    elif x.ndim == 3 and x.shape[2] == 3:
        tag = b"PF"
    elif x.ndim == 3 and x.shape[2] == 1:
        tag, x = b"Pf", x[..., 0]
    else:
        raise ImageFormatError(f"cannot store shape {x.shape} as PFM")
    h, w = x.shape[:2]
    header = tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n"
    body = np.ascontiguousarray(x[::-1]).astype("<f4").tobytes()
    Path(path).write_bytes(header + body)


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"PF", b"Pf"):
        raise ImageFormatError(f"{path}: not a PFM file")
    try:
        w, h = (int(v) for v in parts[1].split())
        scale = float(parts[2])
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed PFM header") from exc
    channels = 3 if parts[0] == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    body = parts[3]
    if len(body) < 4 * count:
        raise ImageFormatError(f"{path}: truncated PFM payload")
    arr = np.frombuffer(body[: 4 * count], dtype=dtype).astype(np.float64)
    arr = arr.reshape((h, w, channels) if channels == 3 else (h, w))
    return arr[::-1].copy()


def read_kernel(path) -> tuple[np.ndarray, float]:
    """Load a kernel file and renormalise it to unit sum.

    Returns ``(kernel, scale)`` where ``scale`` is the factor that was applied
    to the stored taps.
    """
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise KernelError(f"{path}: empty kernel file")
    try:
        h, w = (int(v) for v in lines[0].split())
        rows = [[float(v) for v in ln.split()] for ln in lines[1:]]
    except ValueError as exc:
        raise KernelError(f"{path}: malformed kernel file") from exc
    if len(rows) != h or any(len(r) != w for r in rows):
        raise KernelError(f"{path}: expected {h} rows of {w} values")
    k = np.asarray(rows, dtype=np.float64)
    total = k.sum()
    if not np.isfinite(total) or total <= 0:
        raise KernelError(f"{path}: kernel taps must have a positive finite sum")
    scale = 1.0 / total
    k = k * scale
    return validate_kernel(k), scale


def write_kernel(path, k: np.ndarray) -> None:
    k = np.asarray(k, dtype=np.float64)
    lines = [f"{k.shape[0]} {k.shape[1]}"]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in k]
    Path(path).write_text("\n".join(lines) + "\n")
