"""Grayscale image handling: normalization, bicubic resampling, orientation.

Images are immutable 2D rasters with an isotropic physical pixel spacing in
millimetres. All geometric operations use a separable Catmull-Rom cubic
kernel (a = -0.5) with clamp-to-edge borders so results are bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PilImage

STANDARD_SPACING_MM = 0.2
CNN_INPUT_SHAPE = (128, 64)  # (height, width)


@dataclass(frozen=True)
class Image:
    """2D grayscale raster, uint8 or uint16, with pixel spacing in mm."""

    pixels: np.ndarray
    spacing_mm: float

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"pixels must be a 2D array with positive dims, got shape {px.shape}")
        if px.dtype not in (np.uint8, np.uint16):
            raise ValueError(f"pixel depth must be uint8 or uint16, got {px.dtype}")
        if not self.spacing_mm > 0:
            raise ValueError(f"spacing must be > 0, got {self.spacing_mm}")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def depth_bits(self) -> int:
        return 8 if self.pixels.dtype == np.uint8 else 16


def normalize_intensity(img: Image) -> tuple[Image, bool]:
    """Map a 16-bit image to 8 bits by truncating to the [p5, p99] window.

    Intensities are clamped to the 5th/99th percentile window and rescaled
    linearly to 0..255. Percentiles use linear interpolation between order
    statistics. Returns the 8-bit image and a degenerate flag that is set
    when p99 == p5 (output is then all zeros).
    """
    if img.depth_bits != 16:
        raise ValueError("normalize_intensity expects a 16-bit image")
    v = img.pixels.astype(np.float64)
    p5, p99 = np.percentile(v, [5.0, 99.0])
    if p99 <= p5:
        out = np.zeros_like(v, dtype=np.uint8)
        return Image(out, img.spacing_mm), True
    scaled = np.clip((v - p5) / (p99 - p5), 0.0, 1.0) * 255.0
    out = np.rint(scaled).astype(np.uint8)
    return Image(out, img.spacing_mm), False


def _catmull_rom_weights(t: np.ndarray) -> np.ndarray:
    """Cubic convolution weights for the 4 taps around fractional offsets t.

    t has shape (n,), the fractional part of each source coordinate; the taps
    sit at offsets -1..2 relative to floor(coordinate). a = -0.5.
    """
    a = -0.5
    # distances of the 4 taps from the sample point: t+1, t, 1-t, 2-t
    d = np.stack([t + 1.0, t, 1.0 - t, 2.0 - t], axis=1)
    ad = np.abs(d)
    w = np.where(
        ad <= 1.0,
        (a + 2.0) * ad**3 - (a + 3.0) * ad**2 + 1.0,
        a * ad**3 - 5.0 * a * ad**2 + 8.0 * a * ad - 4.0 * a,
    )
    w[ad >= 2.0] = 0.0
    return w


def _resample_axis(arr: np.ndarray, out_len: int, axis: int) -> np.ndarray:
    """Catmull-Rom resampling of one axis to out_len samples (center-aligned)."""
    in_len = arr.shape[axis]
    scale = in_len / out_len
    x = (np.arange(out_len) + 0.5) * scale - 0.5
    base = np.floor(x).astype(np.int64)
    frac = x - base
    weights = _catmull_rom_weights(frac)  # (out_len, 4)
    moved = np.moveaxis(arr, axis, 0)
    out = np.zeros((out_len,) + moved.shape[1:], dtype=np.float64)
    for k in range(4):
        idx = np.clip(base + (k - 1), 0, in_len - 1)
        w = weights[:, k].reshape((-1,) + (1,) * (moved.ndim - 1))
        out += w * moved[idx]
    return np.moveaxis(out, 0, axis)


def _resize_float(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if pixels.shape == (out_h, out_w):
        return pixels.astype(np.float64)
    out = _resample_axis(pixels.astype(np.float64), out_h, axis=0)
    out = _resample_axis(out, out_w, axis=1)
    return out


def _quantize_like(values: np.ndarray, dtype) -> np.ndarray:
    info = np.iinfo(dtype)
    return np.rint(np.clip(values, info.min, info.max)).astype(dtype)


def resample(img: Image, target_spacing_mm: float = STANDARD_SPACING_MM) -> Image:
    """Resample to the target physical spacing with bicubic interpolation.

    Output dimensions are round(dim * spacing / target). When the image is
    already at the target spacing it is returned unchanged, which also makes
    the operation idempotent at fixed spacing.
    """
    if not target_spacing_mm > 0:
        raise ValueError("target spacing must be > 0")
    if img.spacing_mm == target_spacing_mm:
        return img
    factor = img.spacing_mm / target_spacing_mm
    out_h = int(math.floor(img.height * factor + 0.5))
    out_w = int(math.floor(img.width * factor + 0.5))
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resampling to {target_spacing_mm} mm collapses image to {out_h}x{out_w}")
    out = _resize_float(img.pixels, out_h, out_w)
    return Image(_quantize_like(out, img.pixels.dtype), target_spacing_mm)


def orient_left(img: Image, side: str) -> Image:
    """Mirror right-knee images about the vertical axis; left pass through."""
    if side not in ("L", "R"):
        raise ValueError(f"side must be 'L' or 'R', got {side!r}")
    if side == "L":
        return img
    return Image(np.fliplr(img.pixels), img.spacing_mm)


def crop_resize(img: Image, box, out_shape: tuple[int, int] = CNN_INPUT_SHAPE) -> Image:
    """Cut a box out of the image and resize it to the network input shape.

    The box is first expanded symmetrically about its center to the output
    aspect ratio (2:1 height:width by default). Parts of the expanded box
    outside the image are zero-filled, then the patch is bicubically resized.
    """
    out_h, out_w = out_shape
    x0, y0 = box.x, box.y
    x1, y1 = box.x + box.w, box.y + box.h
    ix0, iy0 = max(x0, 0), max(y0, 0)
    ix1, iy1 = min(x1, img.width), min(y1, img.height)
    if ix0 >= ix1 or iy0 >= iy1:
        raise ValueError(f"box {box} does not intersect a {img.height}x{img.width} image")

    aspect = out_h / out_w
    h, w = box.h, box.w
    if h < aspect * w:
        grow = aspect * w - h
        y0 -= int(math.floor(grow / 2.0 + 0.5))
        h = int(math.floor(aspect * w + 0.5))
    elif h > aspect * w:
        grow = h / aspect - w
        x0 -= int(math.floor(grow / 2.0 + 0.5))
        w = int(math.floor(h / aspect + 0.5))
    x1, y1 = x0 + w, y0 + h

    patch = np.zeros((h, w), dtype=img.pixels.dtype)
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x1, img.width), min(y1, img.height)
    patch[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = img.pixels[sy0:sy1, sx0:sx1]

    if patch.shape == (out_h, out_w):
        return Image(patch, img.spacing_mm)
    resized = _resize_float(patch, out_h, out_w)
    return Image(_quantize_like(resized, img.pixels.dtype), img.spacing_mm)


# ---------------------------------------------------------------------------
# I/O: PNG with a spacing sidecar, and a PGM-style raw format carrying spacing
# ---------------------------------------------------------------------------

def _sidecar_path(path) -> Path:
    return Path(str(path) + ".spacing.txt")


def save_png(img: Image, path) -> None:
    """Write an 8/16-bit grayscale PNG plus a spacing sidecar text file."""
    PilImage.fromarray(np.asarray(img.pixels)).save(path, format="PNG")
    _sidecar_path(path).write_text(f"{img.spacing_mm!r}\n", encoding="utf-8")


def load_png(path, spacing_mm: float | None = None) -> Image:
    """Read a grayscale PNG; spacing comes from the sidecar unless given."""
    arr = np.array(PilImage.open(path))
    if arr.dtype == np.int32:  # PIL mode "I" for some 16-bit PNGs
        arr = arr.astype(np.uint16)
    if spacing_mm is None:
        sidecar = _sidecar_path(path)
        if not sidecar.exists():
            raise FileNotFoundError(f"no spacing sidecar for {path}; pass spacing_mm explicitly")
        spacing_mm = float(sidecar.read_text(encoding="utf-8").strip())
    return Image(arr, spacing_mm)


def save_pgm(img: Image, path) -> None:
    """Write a binary PGM (P5) with the spacing recorded in a comment line.

    16-bit samples are big-endian per the PNM convention.
    """
    maxval = 255 if img.depth_bits == 8 else 65535
    header = f"P5\n# spacing_mm {img.spacing_mm!r}\n{img.width} {img.height}\n{maxval}\n"
    data = img.pixels.astype(">u2").tobytes() if maxval > 255 else img.pixels.tobytes()
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(data)


def load_pgm(path) -> Image:
    """Read a binary PGM written by :func:`save_pgm`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    spacing = None
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(blob):
            raise ValueError(f"{path}: truncated PGM header")
        chunk = blob[pos:].split(b"\n", 1)[0]
        pos += len(chunk) + 1
        text = chunk.decode("ascii").strip()
        if text.startswith("#"):
            parts = text[1:].split()
            if len(parts) == 2 and parts[0] == "spacing_mm":
                spacing = float(parts[1])
            continue
        tokens.extend(t.encode() for t in text.split())
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if spacing is None:
        raise ValueError(f"{path}: PGM lacks a spacing_mm comment")
    dtype = np.uint8 if maxval <= 255 else np.dtype(">u2")
    pixels = np.frombuffer(blob[pos:], dtype=dtype, count=width * height).reshape(height, width)
    if maxval > 255:
        pixels = pixels.astype(np.uint16)
    return Image(pixels, spacing)
