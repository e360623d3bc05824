"""Image files in and out: binary PPM (P6, 8-bit) natively, PNG via Pillow.

All pixel data crosses this boundary as float64 arrays in [0, 1] of shape
(H, W, 3); 8-bit quantization happens only here.
"""

from __future__ import annotations

import os

import numpy as np


class UnreadableImageError(Exception):
    """The file could not be parsed as a supported image."""

    def __init__(self, path, reason: str):
        super().__init__(f"cannot read image '{path}': {reason}")
        self.path = str(path)


def _read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()

    # header tokens may be separated by whitespace and '#' comments
    tokens = []
    i = 0
    while len(tokens) < 4 and i < len(raw):
        c = raw[i:i + 1]
        if c == b"#":
            while i < len(raw) and raw[i:i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(raw) and not raw[j:j + 1].isspace():
                j += 1
            tokens.append(raw[i:j])
            i = j
    if len(tokens) < 4 or tokens[0] != b"P6":
        raise UnreadableImageError(path, "not a binary P6 PPM")
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise UnreadableImageError(path, "malformed PPM header") from None
    if maxval != 255:
        raise UnreadableImageError(path, f"unsupported maxval {maxval}")
    i += 1  # single whitespace byte after maxval
    pixels = raw[i:i + width * height * 3]
    if len(pixels) != width * height * 3:
        raise UnreadableImageError(path, "truncated pixel data")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3)
    return arr.astype(np.float64) / 255.0


def _read_png(path) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError:  # pragma: no cover
        raise UnreadableImageError(path, "PNG support requires Pillow")
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except Exception as exc:
        raise UnreadableImageError(path, str(exc)) from None
    return arr / 255.0


def read_image(path) -> np.ndarray:
    """Load a PPM or PNG as float64 (H, W, 3) in [0, 1]."""
    if not os.path.exists(path):
        raise UnreadableImageError(path, "no such file")
    with open(path, "rb") as f:
        magic = f.read(2)
    if magic == b"P6":
        return _read_ppm(path)
    if magic == b"\x89P":
        return _read_png(path)
    raise UnreadableImageError(path, "unsupported format (PPM P6 and PNG only)")


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    arr = to_uint8(image)
    h, w, _ = arr.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def write_png(path, image: np.ndarray) -> None:
    from PIL import Image
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def write_image(path, image: np.ndarray) -> None:
    if str(path).lower().endswith(".png"):
        write_png(path, image)
    else:
        write_ppm(path, image)
