"""Scene composition: masking embedded objects and grid placement of loose ones.

A scene is split into a k x k grid; each cell independently receives a
library object with probability ``per_cell_prob``, scaled to fit the cell
and positioned at a jittered in-cell location. Placed boxes never overlap
an existing annotation; placement retries up to 10 times, then skips the
cell.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import ObjectAnnotation, Scene
from .errors import ArgumentError
from .imaging import BBox, check_image, resize, stamp
from .util import round_half_away

log = logging.getLogger(__name__)

MAX_PLACE_TRIES = 10


@dataclass
class GridConfig:
    """Grid-placement parameters; ``per_cell_prob`` defaults to 1/N."""

    k: int = 3
    num_classes_n: int = 51
    per_cell_prob: float | None = None
    jitter: float | None = None
    size_frac: tuple[float, float] = (0.6, 0.9)

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ArgumentError(f"grid side k must be >= 1, got {self.k}")
        if self.num_classes_n < 1:
            raise ArgumentError(f"num_classes_n must be >= 1, got {self.num_classes_n}")
        if self.per_cell_prob is None:
            self.per_cell_prob = 1.0 / self.num_classes_n
        if not (0.0 < self.per_cell_prob <= 1.0):
            raise ArgumentError(f"per_cell_prob must lie in (0, 1], got {self.per_cell_prob}")
        lo, hi = self.size_frac
        if not (0.0 < lo <= hi <= 1.0):
            raise ArgumentError(f"size_frac must satisfy 0 < lo <= hi <= 1, got {self.size_frac}")


def mask_embedded(scene: Scene, keep_class_ids: set[int]) -> Scene:
    """Remove annotations outside the keep set; inpaint their pixel regions.

    Each removed region is filled with the per-channel median of a 4 px
    ring around it.
    """
    out = scene.copy()
    keep, drop = [], []
    for anno in out.annotations:
        (keep if anno.class_id in keep_class_ids else drop).append(anno)
    h, w = out.image.shape[:2]
    for anno in drop:
        x1, y1, x2, y2 = anno.box.rounded()
        x1, y1 = max(x1, 0), max(y1, 0)
        x2, y2 = min(x2, w), min(y2, h)
        rx1, ry1 = max(x1 - 4, 0), max(y1 - 4, 0)
        rx2, ry2 = min(x2 + 4, w), min(y2 + 4, h)
        ring_mask = np.zeros((ry2 - ry1, rx2 - rx1), dtype=bool)
        ring_mask[:, :] = True
        ring_mask[y1 - ry1 : y2 - ry1, x1 - rx1 : x2 - rx1] = False
        ring = out.image[ry1:ry2, rx1:rx2][ring_mask]
        fill = np.median(ring, axis=0) if ring.size else np.float32([0.5, 0.5, 0.5])
        out.image[y1:y2, x1:x2] = fill.astype(np.float32)
    out.annotations = keep
    return out


def _place_one(
    scene_img: np.ndarray,
    obj_img: np.ndarray,
    cell: tuple[float, float, float, float],
    cfg: GridConfig,
    existing: list[BBox],
    rng: np.random.Generator,
) -> tuple[np.ndarray, BBox] | None:
    """Scale an object into a cell and find a non-overlapping position."""
    cx1, cy1, cx2, cy2 = cell
    cell_side = min(cx2 - cx1, cy2 - cy1)
    frac = rng.uniform(*cfg.size_frac)
    oh, ow = obj_img.shape[:2]
    factor = frac * cell_side / max(ow, oh)
    nw = max(1, round_half_away(ow * factor))
    nh = max(1, round_half_away(oh * factor))
    sized = resize(obj_img, nw, nh, "bilinear")

    for _ in range(MAX_PLACE_TRIES):
        max_x, max_y = cx2 - nw, cy2 - nh
        if max_x < cx1 or max_y < cy1:
            return None
        if cfg.jitter is None:
            x = rng.uniform(cx1, max_x)
            y = rng.uniform(cy1, max_y)
        else:
            x = (cx1 + max_x) / 2.0 + rng.uniform(-cfg.jitter, cfg.jitter)
            y = (cy1 + max_y) / 2.0 + rng.uniform(-cfg.jitter, cfg.jitter)
            x = min(max(x, cx1), max_x)
            y = min(max(y, cy1), max_y)
        xi, yi = round_half_away(x), round_half_away(y)
        box = BBox(float(xi), float(yi), float(xi + nw), float(yi + nh))
        if any(box.intersects(b) for b in existing):
            continue
        return stamp(scene_img, sized, xi, yi), box
    return None


def _grid_cells(width: int, height: int, k: int) -> list[tuple[float, float, float, float]]:
    cw, ch = width / k, height / k
    return [
        (col * cw, row * ch, (col + 1) * cw, (row + 1) * ch)
        for row in range(k)
        for col in range(k)
    ]


def grid_place(
    scene: Scene,
    library: Sequence[tuple[np.ndarray, int]],
    cfg: GridConfig,
    seed: int,
    *,
    record: list | None = None,
) -> Scene:
    """Populate grid cells with library objects; appends loose annotations.

    ``record``, when given, collects ``(cell_index, class_id, BBox)`` for
    every successful placement.
    """
    if not library:
        raise ArgumentError("object library must be nonempty")
    rng = np.random.default_rng(seed)
    out = scene.copy()
    existing = [a.box for a in out.annotations]
    img = out.image
    for cell_index, cell in enumerate(_grid_cells(out.width, out.height, cfg.k)):
        if rng.uniform() >= cfg.per_cell_prob:
            continue
        obj_img, class_id = library[int(rng.integers(len(library)))]
        placed = _place_one(img, obj_img, cell, cfg, existing, rng)
        if placed is None:
            log.debug("scene %s: cell %d skipped after %d tries",
                      scene.scene_id, cell_index, MAX_PLACE_TRIES)
            continue
        img, box = placed
        existing.append(box)
        out.annotations.append(ObjectAnnotation(box=box, class_id=class_id, is_loose=True))
        if record is not None:
            record.append((cell_index, class_id, box))
    out.image = img
    return out


def poison_scene(
    scene: Scene,
    poison_objects: Sequence[tuple[np.ndarray, int | None]],
    clean_objects: Sequence[tuple[np.ndarray, int]],
    cfg: GridConfig,
    seed: int,
    *,
    p_poison: float = 0.15,
    augment_fn: Callable[[np.ndarray, np.random.Generator], np.ndarray] | None = None,
) -> Scene:
    """Grid placement over the poisoned/clean pool mixture.

    Each fired cell draws a poisoned object with probability ``p_poison``
    (when the pool is nonempty), else a clean one. Poisoned entries carry
    their rewritten label; a ``None`` label composites pixels without an
    annotation. ``augment_fn`` is applied to poisoned objects at placement
    time.
    """
    if not poison_objects and not clean_objects:
        raise ArgumentError("need at least one nonempty object pool")
    rng = np.random.default_rng(seed)
    out = scene.copy()
    existing = [a.box for a in out.annotations]
    img = out.image
    for cell_index, cell in enumerate(_grid_cells(out.width, out.height, cfg.k)):
        if rng.uniform() >= cfg.per_cell_prob:
            continue
        use_poison = bool(poison_objects) and (not clean_objects or rng.uniform() < p_poison)
        if use_poison:
            obj_img, label = poison_objects[int(rng.integers(len(poison_objects)))]
            if augment_fn is not None:
                obj_img = augment_fn(obj_img, rng)
            is_loose = True
        else:
            obj_img, label = clean_objects[int(rng.integers(len(clean_objects)))]
            is_loose = True
        placed = _place_one(img, obj_img, cell, cfg, existing, rng)
        if placed is None:
            log.debug("scene %s: cell %d skipped after %d tries",
                      scene.scene_id, cell_index, MAX_PLACE_TRIES)
            continue
        img, box = placed
        existing.append(box)
        if label is not None:
            out.annotations.append(
                ObjectAnnotation(box=box, class_id=int(label), is_loose=is_loose)
            )
    out.image = img
    return out
