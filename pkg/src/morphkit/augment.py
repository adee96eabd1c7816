"""Object augmentation family modeling physical-world capture variation.

Transforms fire independently with probability ``p_aug`` in a fixed order:
horizontal skew, vertical skew, rotation, scale, shadow, brightness,
contrast, sharpness, gaussian noise, motion blur. Geometry runs first,
photometric adjustments second, noise and blur last; only the scale
transform changes image dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ArgumentError
from .imaging import BBox, check_image, clamp01, resize
from .util import round_half_away

TRANSFORM_ORDER = (
    "skew_h", "skew_v", "rotation", "scale",
    "shadow", "brightness", "contrast", "sharpness",
    "noise", "motion_blur",
)


@dataclass
class AugmentParams:
    """Per-transform ranges; draws are uniform within each range."""

    p_aug: float = 0.4
    skew_h_deg: tuple[float, float] = (-15.0, 15.0)
    skew_v_deg: tuple[float, float] = (-15.0, 15.0)
    rotation_deg: tuple[float, float] = (-20.0, 20.0)
    scale_range: tuple[float, float] = (0.5, 1.5)
    shadow_strength: tuple[float, float] = (0.0, 0.4)
    brightness: tuple[float, float] = (-0.25, 0.25)
    contrast: tuple[float, float] = (0.75, 1.25)
    sharpness: tuple[float, float] = (0.5, 1.5)
    noise_sigma: tuple[float, float] = (0.0, 0.05)
    motion_blur_px: tuple[float, float] = (3.0, 9.0)
    disabled: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not (0.0 <= self.p_aug <= 1.0):
            raise ArgumentError(f"p_aug must lie in [0, 1], got {self.p_aug}")
        for name in ("skew_h_deg", "skew_v_deg", "rotation_deg", "scale_range",
                     "shadow_strength", "brightness", "contrast", "sharpness",
                     "noise_sigma", "motion_blur_px"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ArgumentError(f"{name} range is empty: ({lo}, {hi})")
        if abs(self.skew_h_deg[0]) >= 90 or abs(self.skew_h_deg[1]) >= 90:
            raise ArgumentError("skew_h_deg must stay within (-90, 90)")
        if abs(self.skew_v_deg[0]) >= 90 or abs(self.skew_v_deg[1]) >= 90:
            raise ArgumentError("skew_v_deg must stay within (-90, 90)")
        if self.scale_range[0] <= 0:
            raise ArgumentError("scale_range must be positive")
        if self.noise_sigma[0] < 0:
            raise ArgumentError("noise_sigma must be non-negative")
        for name in self.disabled:
            if name not in TRANSFORM_ORDER:
                raise ArgumentError(f"unknown transform {name!r} in disabled")

    def widened(self, factor: float) -> "AugmentParams":
        """Ranges stretched about their midpoint (test-condition simulation)."""

        def stretch(rng: tuple[float, float]) -> tuple[float, float]:
            mid = (rng[0] + rng[1]) / 2.0
            half = (rng[1] - rng[0]) / 2.0 * factor
            return (mid - half, mid + half)

        return AugmentParams(
            p_aug=self.p_aug,
            skew_h_deg=stretch(self.skew_h_deg),
            skew_v_deg=stretch(self.skew_v_deg),
            rotation_deg=stretch(self.rotation_deg),
            scale_range=(max(0.05, stretch(self.scale_range)[0]), stretch(self.scale_range)[1]),
            shadow_strength=(max(0.0, stretch(self.shadow_strength)[0]),
                             min(1.0, stretch(self.shadow_strength)[1])),
            brightness=stretch(self.brightness),
            contrast=(max(0.05, stretch(self.contrast)[0]), stretch(self.contrast)[1]),
            sharpness=(max(0.0, stretch(self.sharpness)[0]), stretch(self.sharpness)[1]),
            noise_sigma=(max(0.0, stretch(self.noise_sigma)[0]), stretch(self.noise_sigma)[1]),
            motion_blur_px=(max(1.0, stretch(self.motion_blur_px)[0]),
                            stretch(self.motion_blur_px)[1]),
            disabled=self.disabled,
        )


def _affine_warp(img: np.ndarray, inverse: np.ndarray) -> np.ndarray:
    """Sample ``img`` at ``inverse @ dst`` with bilinear, clamp-to-edge taps."""
    h, w = img.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    src_x = inverse[0, 0] * xs + inverse[0, 1] * ys + inverse[0, 2]
    src_y = inverse[1, 0] * xs + inverse[1, 1] * ys + inverse[1, 2]
    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    fx = (src_x - x0)[..., None].astype(np.float32)
    fy = (src_y - y0)[..., None].astype(np.float32)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    top = img[y0c, x0c] * (1 - fx) + img[y0c, x1c] * fx
    bot = img[y1c, x0c] * (1 - fx) + img[y1c, x1c] * fx
    return clamp01(top * (1 - fy) + bot * fy)


def _center_affine(matrix2: np.ndarray, w: int, h: int) -> np.ndarray:
    """Lift a 2x2 linear map to a 3x3 affine acting about the image center."""
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    out = np.eye(3)
    out[:2, :2] = matrix2
    out[0, 2] = cx - matrix2[0, 0] * cx - matrix2[0, 1] * cy
    out[1, 2] = cy - matrix2[1, 0] * cx - matrix2[1, 1] * cy
    return out


def _box_blur3(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            out += padded[dy : dy + img.shape[0], dx : dx + img.shape[1]]
    return out / 9.0


def _motion_blur(img: np.ndarray, length: int, direction: int) -> np.ndarray:
    """Average ``length`` taps along one of four directions (deg 0/45/90/135)."""
    steps = {0: (0, 1), 45: (-1, 1), 90: (1, 0), 135: (1, 1)}[direction]
    dy, dx = steps
    half = length // 2
    pad_y, pad_x = abs(dy) * half, abs(dx) * half
    padded = np.pad(img, ((pad_y, pad_y), (pad_x, pad_x), (0, 0)), mode="edge")
    h, w = img.shape[:2]
    out = np.zeros_like(img)
    for i in range(-half, length - half):
        y0 = pad_y + dy * i
        x0 = pad_x + dx * i
        out += padded[y0 : y0 + h, x0 : x0 + w]
    return out / float(length)


def augment_with_transform(
    obj: np.ndarray, params: AugmentParams, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Apply the augmentation family; also return the forward affine map.

    The affine maps input pixel coordinates to output coordinates for the
    geometric transforms (skew/rotation/scale); photometric transforms do
    not move pixels.
    """
    img = check_image(obj)
    rng = np.random.default_rng(seed)
    affine = np.eye(3)

    def fires(name: str) -> bool:
        if name in params.disabled:
            return False
        return bool(rng.uniform() < params.p_aug)

    if fires("skew_h"):
        angle = math.radians(rng.uniform(*params.skew_h_deg))
        m = np.array([[1.0, math.tan(angle)], [0.0, 1.0]])
        fwd = _center_affine(m, img.shape[1], img.shape[0])
        img = _affine_warp(img, np.linalg.inv(fwd))
        affine = fwd @ affine

    if fires("skew_v"):
        angle = math.radians(rng.uniform(*params.skew_v_deg))
        m = np.array([[1.0, 0.0], [math.tan(angle), 1.0]])
        fwd = _center_affine(m, img.shape[1], img.shape[0])
        img = _affine_warp(img, np.linalg.inv(fwd))
        affine = fwd @ affine

    if fires("rotation"):
        angle = math.radians(rng.uniform(*params.rotation_deg))
        c, s = math.cos(angle), math.sin(angle)
        m = np.array([[c, -s], [s, c]])
        fwd = _center_affine(m, img.shape[1], img.shape[0])
        img = _affine_warp(img, np.linalg.inv(fwd))
        affine = fwd @ affine

    if fires("scale"):
        factor = rng.uniform(*params.scale_range)
        h, w = img.shape[:2]
        nw = max(1, round_half_away(w * factor))
        nh = max(1, round_half_away(h * factor))
        img = resize(img, nw, nh, "bilinear")
        fwd = np.eye(3)
        fwd[0, 0] = nw / w
        fwd[1, 1] = nh / h
        fwd[0, 2] = 0.5 * nw / w - 0.5
        fwd[1, 2] = 0.5 * nh / h - 0.5
        affine = fwd @ affine

    if fires("shadow"):
        strength = rng.uniform(*params.shadow_strength)
        theta = rng.uniform(0.0, 2.0 * math.pi)
        h, w = img.shape[:2]
        offset = rng.uniform(-0.25, 0.25) * math.hypot(h, w)
        ys, xs = np.mgrid[0:h, 0:w]
        side = (xs - (w - 1) / 2.0) * math.cos(theta) + (ys - (h - 1) / 2.0) * math.sin(theta)
        mask = (side >= offset)[..., None]
        img = clamp01(np.where(mask, img * (1.0 - strength), img))

    if fires("brightness"):
        img = clamp01(img * (1.0 + rng.uniform(*params.brightness)))

    if fires("contrast"):
        img = clamp01((img - 0.5) * rng.uniform(*params.contrast) + 0.5)

    if fires("sharpness"):
        amount = rng.uniform(*params.sharpness)
        img = clamp01(img + (amount - 1.0) * (img - _box_blur3(img)))

    if fires("noise"):
        sigma = rng.uniform(*params.noise_sigma)
        img = clamp01(img + rng.normal(0.0, sigma, size=img.shape).astype(np.float32))

    if fires("motion_blur"):
        length = round_half_away(rng.uniform(*params.motion_blur_px))
        length = max(3, length | 1)  # odd, at least 3
        direction = int(rng.choice([0, 45, 90, 135]))
        img = clamp01(_motion_blur(img, length, direction))

    return img.astype(np.float32), affine


def augment(obj: np.ndarray, params: AugmentParams, seed: int) -> np.ndarray:
    """The augmentation family A; identity when ``p_aug == 0``."""
    if params.p_aug == 0.0:
        return check_image(obj).copy()
    return augment_with_transform(obj, params, seed)[0]


def transform_box(box: BBox, affine: np.ndarray, out_size: tuple[int, int]) -> BBox:
    """Map a box through the forward affine; clip into the output image."""
    corners = np.array([
        [box.x1, box.y1, 1.0], [box.x2, box.y1, 1.0],
        [box.x1, box.y2, 1.0], [box.x2, box.y2, 1.0],
    ])
    mapped = corners @ affine.T
    xs, ys = mapped[:, 0], mapped[:, 1]
    w, h = out_size
    return BBox(
        float(np.clip(xs.min(), 0, w - 1)),
        float(np.clip(ys.min(), 0, h - 1)),
        float(np.clip(xs.max(), 1, w)),
        float(np.clip(ys.max(), 1, h)),
    )


def poison_object(
    obj: np.ndarray,
    obj_box: BBox,
    spec,
    params: AugmentParams,
    seed: int,
) -> np.ndarray:
    """Full object poisoning: augmentation over the physicalized stamp."""
    from .triggers import placement_anchor, physicalize_stamp

    obj = check_image(obj)
    local = obj_box.shifted(-obj_box.x1, -obj_box.y1)
    anchors = placement_anchor(local, spec.placement, spec.size_r)
    stamped = physicalize_stamp(obj, spec, anchors)
    return augment(stamped, params, seed)
