"""Pixel-level primitives: image buffers, box geometry, resize/crop/stamp.

Images are numpy arrays of shape (height, width, 3), float32, intensities
in [0, 1], row-major. Every compositing operation clamps its result back
into [0, 1]; 8-bit quantization happens only at the PNG boundary.

Box coordinates are real-valued; rasterization rounds half away from zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ArgumentError, BoundsError
from .util import round_half_away

CHANNELS = 3


def check_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate shape/range and return a float32 view of an image buffer."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != CHANNELS:
        raise ArgumentError(f"{name} must have shape (h, w, {CHANNELS}), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ArgumentError(f"{name} must be at least 1x1, got {arr.shape}")
    if arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    lo, hi = float(arr.min()), float(arr.max())
    if lo < -1e-6 or hi > 1 + 1e-6:
        raise ArgumentError(f"{name} intensities must lie in [0, 1], found [{lo}, {hi}]")
    return np.clip(arr, 0.0, 1.0)


def clamp01(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0)


def new_image(width: int, height: int, fill: float | tuple[float, float, float] = 0.0) -> np.ndarray:
    if width < 1 or height < 1:
        raise ArgumentError(f"image dims must be >= 1, got {width}x{height}")
    img = np.empty((height, width, CHANNELS), dtype=np.float32)
    img[...] = np.asarray(fill, dtype=np.float32)
    return clamp01(img)


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box (x1, y1) top-left to (x2, y2) bottom-right, exclusive."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ArgumentError(f"degenerate box {self.as_tuple()}: need x1 < x2 and y1 < y2")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    def shifted(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def scaled(self, factor: float) -> "BBox":
        return BBox(self.x1 * factor, self.y1 * factor, self.x2 * factor, self.y2 * factor)

    def rounded(self) -> tuple[int, int, int, int]:
        """Pixel-index corners, half rounded away from zero."""
        return (
            round_half_away(self.x1),
            round_half_away(self.y1),
            round_half_away(self.x2),
            round_half_away(self.y2),
        )

    def expanded(self, margin: float) -> "BBox":
        return BBox(self.x1 - margin, self.y1 - margin, self.x2 + margin, self.y2 + margin)

    def clipped(self, width: float, height: float) -> "BBox":
        return BBox(
            min(max(self.x1, 0.0), width - 1.0),
            min(max(self.y1, 0.0), height - 1.0),
            max(min(self.x2, width), 1.0),
            max(min(self.y2, height), 1.0),
        )

    def intersects(self, other: "BBox") -> bool:
        return not (
            self.x2 <= other.x1 or other.x2 <= self.x1
            or self.y2 <= other.y1 or other.y2 <= self.y1
        )

    def contains_box(self, other: "BBox") -> bool:
        return (
            self.x1 <= other.x1 and self.y1 <= other.y1
            and self.x2 >= other.x2 and self.y2 >= other.y2
        )


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def crop(img: np.ndarray, box: BBox) -> np.ndarray:
    """Copy the pixels under ``box``; corners rasterized half-away-from-zero."""
    img = check_image(img)
    h, w = img.shape[:2]
    x1, y1, x2, y2 = box.rounded()
    if x1 < 0 or y1 < 0 or x2 > w or y2 > h:
        raise BoundsError(f"crop box {box.as_tuple()} outside image {w}x{h}")
    if x2 <= x1 or y2 <= y1:
        raise BoundsError(f"crop box {box.as_tuple()} rasterizes to an empty region")
    return img[y1:y2, x1:x2].copy()


@lru_cache(maxsize=512)
def _resize_weights(src: int, dst: int) -> np.ndarray:
    """(dst, src) triangle-kernel weight matrix; antialiased when shrinking."""
    if src == dst:
        return np.eye(src, dtype=np.float32)
    scale = src / dst
    support = max(1.0, scale)
    centers = (np.arange(dst, dtype=np.float64) + 0.5) * scale - 0.5
    taps = np.arange(src, dtype=np.float64)
    weights = 1.0 - np.abs(taps[None, :] - centers[:, None]) / support
    weights = np.maximum(weights, 0.0)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights.astype(np.float32)


@lru_cache(maxsize=512)
def _nearest_index(src: int, dst: int) -> np.ndarray:
    scale = src / dst
    idx = np.floor((np.arange(dst, dtype=np.float64) + 0.5) * scale).astype(np.int64)
    return np.clip(idx, 0, src - 1)


def resize(img: np.ndarray, width: int, height: int, method: str = "bilinear") -> np.ndarray:
    """Resample to (width, height) with ``nearest`` or ``bilinear``.

    Bilinear shrinking widens the kernel support to the scale factor
    (antialiasing), which is what models the camera blur this primitive
    exists to produce; enlarging uses the plain two-tap kernel.
    """
    img = check_image(img)
    if width < 1 or height < 1:
        raise ArgumentError(f"target dims must be >= 1, got {width}x{height}")
    h, w = img.shape[:2]
    if (w, h) == (width, height):
        return img.copy()
    if method == "nearest":
        rows = _nearest_index(h, height)
        cols = _nearest_index(w, width)
        return img[rows][:, cols].copy()
    if method == "bilinear":
        wh = _resize_weights(h, height)
        ww = _resize_weights(w, width)
        tmp = np.tensordot(wh, img, axes=([1], [0]))          # (height, w, c)
        out = np.tensordot(tmp, ww, axes=([1], [1]))          # (height, c, width)
        return clamp01(np.ascontiguousarray(out.transpose(0, 2, 1)))
    raise ArgumentError(f"unknown resize method {method!r}")


def resize_weights(src: int, dst: int) -> np.ndarray:
    """Public accessor for the bilinear weight matrix (used by feature maps)."""
    return _resize_weights(src, dst)


def stamp(base: np.ndarray, patch: np.ndarray, x: int, y: int, opacity: float = 1.0) -> np.ndarray:
    """Replace the pixels under the patch footprint at top-left (x, y).

    ``opacity`` < 1 alpha-blends the patch over the base instead.
    """
    base = check_image(base, "base")
    patch = check_image(patch, "patch")
    x = round_half_away(x)
    y = round_half_away(y)
    h, w = base.shape[:2]
    ph, pw = patch.shape[:2]
    if x < 0 or y < 0 or x + pw > w or y + ph > h:
        raise BoundsError(
            f"patch {pw}x{ph} at ({x}, {y}) exceeds base bounds {w}x{h}"
        )
    out = base.copy()
    if opacity >= 1.0:
        out[y : y + ph, x : x + pw] = patch
    else:
        region = out[y : y + ph, x : x + pw]
        out[y : y + ph, x : x + pw] = opacity * patch + (1.0 - opacity) * region
    return clamp01(out)


def to_uint8(img: np.ndarray) -> np.ndarray:
    img = check_image(img)
    return np.round(img * 255.0).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float32) / 255.0).astype(np.float32)


def read_png(path: Path | str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return from_uint8(arr)


def write_png(path: Path | str, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")
