"""PNG/PPM export of ``(C, H, W)`` pixel arrays. Quantisation to 8 bits happens here only."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def quantize(pixels) -> np.ndarray:
    """Round to the nearest 8-bit value, ``(C, H, W)`` -> ``(H, W, C)`` uint8."""
    arr = np.clip(np.rint(np.asarray(pixels, dtype=np.float64)), 0, 255).astype(np.uint8)
    if arr.ndim == 2:
        return arr
    return np.ascontiguousarray(arr.transpose(1, 2, 0))


def _from_hwc(arr: np.ndarray) -> np.ndarray:
    arr = arr.astype(np.float64)
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


def save_png(path, pixels) -> None:
    hwc = quantize(pixels)
    if hwc.ndim == 3 and hwc.shape[2] == 1:
        hwc = hwc[:, :, 0]
    Image.fromarray(hwc).save(path, format="PNG", optimize=False)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return _from_hwc(np.asarray(im))


def save_ppm(path, pixels) -> None:
    """Binary P6 (RGB) or P5 (single channel) with maxval 255."""
    hwc = quantize(pixels)
    if hwc.ndim == 3 and hwc.shape[2] == 1:
        hwc = hwc[:, :, 0]
    magic = b"P5" if hwc.ndim == 2 else b"P6"
    h, w = hwc.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + hwc.tobytes())


def load_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported PPM variant {magic!r} maxval={maxval}")
    channels = 3 if magic == b"P6" else 1
    arr = np.frombuffer(data, dtype=np.uint8, count=w * h * channels, offset=pos)
    return _from_hwc(arr.reshape((h, w, channels)) if channels == 3 else arr.reshape(h, w))


def save_image(path, pixels) -> None:
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pgm"):
        save_ppm(path, pixels)
    else:
        save_png(path, pixels)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pgm"):
        return load_ppm(path)
    return load_png(path)
