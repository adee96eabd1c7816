"""Digitalized-physical trigger synthesis.

A digital patch is turned into a physically plausible stamp by scaling the
target region up, stamping the patch, and scaling back down, so the stamp
picks up the soft edges a camera would produce. Variant generation jitters
position, brightness, and opacity to widen the poisoned distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ArgumentError, PlacementError
from .imaging import BBox, check_image, clamp01, new_image, resize, stamp
from .util import round_half_away

# vertical center of the footprint as a fraction of box height
PLACEMENT_FRACTIONS = {"low": 0.72, "high": 0.28, "roof": 0.20}
OUTSIDE_GAP = 8.0
HALO_PX = 2


def default_trigger_patch(side: int = 32, color: tuple[float, float, float] = (0.49, 1.0, 0.05)) -> np.ndarray:
    """Sticky-note style patch: flat saturated fill, faint vertical shading."""
    patch = new_image(side, side, color)
    shade = np.linspace(1.0, 0.97, side, dtype=np.float32)[:, None, None]
    return clamp01(patch * shade)


def desaturate(img: np.ndarray, saturation: float) -> np.ndarray:
    """Blend toward per-pixel luminance; leaves the grayscale image intact."""
    img = check_image(img)
    luma = img @ np.float32([0.299, 0.587, 0.114])
    return clamp01(saturation * img + (1.0 - saturation) * luma[..., None])


@dataclass
class TriggerSpec:
    """Trigger patch plus placement rule and stamp geometry.

    Defaults mirror the reference configuration: scale factor 16, 76 px
    stamped side, four variants. The jitter fields define the variant
    distribution (position, patch brightness, stamp opacity); zeroing
    them collapses variants to the plain deterministic stamp.
    """

    patch: np.ndarray = field(default_factory=default_trigger_patch)
    size_r: int = 76
    placement: str = "low"
    scale_s: float = 16.0
    n_variants: int = 4
    pos_jitter: float = 2.0
    saturation_range: tuple[float, float] = (0.45, 0.60)
    brightness_range: tuple[float, float] = (0.90, 1.00)
    opacity_range: tuple[float, float] = (0.85, 1.00)

    def __post_init__(self) -> None:
        self.patch = check_image(self.patch, "trigger patch")
        if self.size_r < 1:
            raise ArgumentError(f"size_r must be >= 1, got {self.size_r}")
        if self.scale_s < 1:
            raise ArgumentError(f"scale_s must be >= 1, got {self.scale_s}")
        if self.n_variants < 1:
            raise ArgumentError(f"n_variants must be >= 1, got {self.n_variants}")
        if self.placement not in ("low", "high", "outside", "multi_piece", "roof"):
            raise ArgumentError(f"unknown placement {self.placement!r}")
        if self.pos_jitter < 0:
            raise ArgumentError("pos_jitter must be >= 0")
        for name in ("saturation_range", "brightness_range", "opacity_range"):
            lo, hi = getattr(self, name)
            if not (0.0 < lo <= hi <= 1.5):
                raise ArgumentError(f"{name} must satisfy 0 < lo <= hi <= 1.5, got ({lo}, {hi})")

    def digital(self) -> "TriggerSpec":
        """Plain digital-stamp counterpart: verbatim patch, exact placement."""
        return TriggerSpec(
            patch=self.patch, size_r=self.size_r, placement=self.placement,
            scale_s=1.0, n_variants=1, pos_jitter=0.0,
            saturation_range=(1.0, 1.0), brightness_range=(1.0, 1.0),
            opacity_range=(1.0, 1.0),
        )


def _centered_footprint(obj_box: BBox, frac: float, size_r: float) -> BBox:
    cx = (obj_box.x1 + obj_box.x2) / 2.0
    cy = obj_box.y1 + frac * obj_box.height
    half = size_r / 2.0
    fp = BBox(cx - half, cy - half, cx + half, cy + half)
    # shift minimally so the footprint stays inside the object box
    dx = max(0.0, obj_box.x1 - fp.x1) + min(0.0, obj_box.x2 - fp.x2)
    dy = max(0.0, obj_box.y1 - fp.y1) + min(0.0, obj_box.y2 - fp.y2)
    return fp.shifted(dx, dy)


def placement_anchor(
    obj_box: BBox,
    placement: str,
    size_r: int,
    *,
    scene_size: tuple[int, int] | None = None,
    avoid_boxes: Sequence[BBox] = (),
    gap: float = OUTSIDE_GAP,
    rng: np.random.Generator | None = None,
) -> list[BBox]:
    """Footprint box(es) for a placement rule, in the frame of ``obj_box``.

    Returns one box for single placements and two for ``multi_piece``.
    ``outside`` needs ``scene_size`` and respects ``avoid_boxes``.
    """
    if placement in PLACEMENT_FRACTIONS:
        if size_r > min(obj_box.width, obj_box.height):
            raise PlacementError(
                f"trigger side {size_r} exceeds object box "
                f"{obj_box.width:.1f}x{obj_box.height:.1f}"
            )
        return [_centered_footprint(obj_box, PLACEMENT_FRACTIONS[placement], size_r)]

    if placement == "multi_piece":
        if size_r > min(obj_box.width, obj_box.height):
            raise PlacementError(
                f"trigger side {size_r} exceeds object box "
                f"{obj_box.width:.1f}x{obj_box.height:.1f}"
            )
        if size_r >= (PLACEMENT_FRACTIONS["low"] - PLACEMENT_FRACTIONS["high"]) * obj_box.height:
            raise PlacementError(
                f"two {size_r} px pieces cannot fit disjointly on a "
                f"{obj_box.height:.1f} px tall box"
            )
        return [
            _centered_footprint(obj_box, PLACEMENT_FRACTIONS["high"], size_r),
            _centered_footprint(obj_box, PLACEMENT_FRACTIONS["low"], size_r),
        ]

    if placement == "outside":
        if scene_size is None:
            raise ArgumentError("outside placement requires scene_size")
        width, height = scene_size
        if size_r > width or size_r > height:
            raise PlacementError(f"trigger side {size_r} exceeds scene {width}x{height}")
        cx, cy = obj_box.center
        half = size_r / 2.0
        candidates = [
            (cx - half, obj_box.y2 + gap),                 # below
            (cx - half, obj_box.y1 - gap - size_r),        # above
            (obj_box.x2 + gap, cy - half),                 # right
            (obj_box.x1 - gap - size_r, cy - half),        # left
        ]
        avoid = list(avoid_boxes)

        def ok(fp: BBox) -> bool:
            if fp.x1 < 0 or fp.y1 < 0 or fp.x2 > width or fp.y2 > height:
                return False
            return not any(fp.intersects(b) for b in avoid)

        for x, y in candidates:
            fp = BBox(x, y, x + size_r, y + size_r)
            if ok(fp):
                return [fp]
        if rng is not None:
            for _ in range(64):
                x = rng.uniform(0, width - size_r)
                y = rng.uniform(0, height - size_r)
                fp = BBox(x, y, x + size_r, y + size_r)
                if ok(fp):
                    return [fp]
        raise PlacementError("no free position outside the annotation boxes")

    raise ArgumentError(f"unknown placement {placement!r}")


def physicalize_stamp(
    obj: np.ndarray,
    spec: TriggerSpec,
    anchor: BBox | Sequence[BBox],
    opacity: float = 1.0,
    patch: np.ndarray | None = None,
) -> np.ndarray:
    """Stamp the trigger through a scale-up / stamp / scale-down cycle.

    Pixels outside the footprint(s) plus a 2 px interpolation halo are
    restored from the input, so the blur stays local to the stamp. With
    ``scale_s == 1`` this reduces to a plain digital stamp. ``patch``
    overrides the spec patch (used by variant jittering).
    """
    obj = check_image(obj, "object crop")
    anchors = [anchor] if isinstance(anchor, BBox) else list(anchor)
    if not anchors:
        raise ArgumentError("need at least one anchor")
    src_patch = spec.patch if patch is None else check_image(patch, "patch")
    h, w = obj.shape[:2]
    r = spec.size_r
    for fp in anchors:
        x1, y1, x2, y2 = fp.rounded()
        if x1 < 0 or y1 < 0 or x2 > w or y2 > h:
            raise PlacementError(f"footprint {fp.as_tuple()} outside object crop {w}x{h}")

    s = float(spec.scale_s)
    if s == 1.0:
        out = obj
        small = resize(src_patch, r, r, "bilinear")
        for fp in anchors:
            x1, y1, _, _ = fp.rounded()
            out = stamp(out, small, x1, y1, opacity=opacity)
        return out

    up_w = max(1, round_half_away(w * s))
    up_h = max(1, round_half_away(h * s))
    big = resize(obj, up_w, up_h, "bilinear")
    big_r = max(1, round_half_away(r * s))
    big_patch = resize(src_patch, big_r, big_r, "bilinear")
    for fp in anchors:
        bx = min(max(round_half_away(fp.x1 * s), 0), up_w - big_r)
        by = min(max(round_half_away(fp.y1 * s), 0), up_h - big_r)
        big = stamp(big, big_patch, bx, by, opacity=opacity)
    down = resize(big, w, h, "bilinear")

    # restore everything outside footprint + halo
    keep = np.ones((h, w), dtype=bool)
    for fp in anchors:
        x1, y1, x2, y2 = fp.expanded(HALO_PX).rounded()
        keep[max(y1, 0) : min(y2, h), max(x1, 0) : min(x2, w)] = False
    out = down
    out[keep] = obj[keep]
    return clamp01(out)


def make_trigger_variants(
    spec: TriggerSpec,
    obj: np.ndarray,
    anchor: BBox | Sequence[BBox],
    seed: int,
    *,
    pos_jitter: float | None = None,
    saturation_range: tuple[float, float] | None = None,
    brightness_range: tuple[float, float] | None = None,
    opacity_range: tuple[float, float] | None = None,
    count: int | None = None,
) -> list[np.ndarray]:
    """Jittered physicalized stamps under a fixed seed.

    Each variant draws a position offset, a saturation factor (printed,
    outdoor-lit stickers show washed-out color compared to their digital
    RGB), a mild brightness factor, and a stamp opacity (blend with the
    carrying surface). Parameters default to the spec's variant
    distribution; ``count`` overrides ``spec.n_variants``.
    """
    obj = check_image(obj, "object crop")
    anchors = [anchor] if isinstance(anchor, BBox) else list(anchor)
    rng = np.random.default_rng(seed)
    pos_jitter = spec.pos_jitter if pos_jitter is None else pos_jitter
    saturation_range = spec.saturation_range if saturation_range is None else saturation_range
    brightness_range = spec.brightness_range if brightness_range is None else brightness_range
    opacity_range = spec.opacity_range if opacity_range is None else opacity_range
    n = spec.n_variants if count is None else count
    h, w = obj.shape[:2]
    variants = []
    for _ in range(n):
        dx, dy = rng.uniform(-pos_jitter, pos_jitter, size=2)
        saturation = rng.uniform(*saturation_range)
        brightness = rng.uniform(*brightness_range)
        opacity = rng.uniform(*opacity_range)
        moved = []
        for fp in anchors:
            shifted = fp.shifted(dx, dy)
            # keep the jittered footprint inside the crop
            sx = max(0.0, -shifted.x1) + min(0.0, w - shifted.x2)
            sy = max(0.0, -shifted.y1) + min(0.0, h - shifted.y2)
            moved.append(shifted.shifted(sx, sy))
        patch = clamp01(desaturate(spec.patch, saturation) * brightness)
        variants.append(physicalize_stamp(obj, spec, moved, opacity=opacity, patch=patch))
    return variants
