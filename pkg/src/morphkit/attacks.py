"""Attack taxonomy: poisoning plans, label rewriting, and corpus assembly.

Seven attack variants are supported. Dirty-label variants stamp triggers
into object boxes (or outside every box for the scene-global variant) and
rewrite labels; the disappearance variant removes annotations instead; the
clean-label variant perturbs target-class pixels within an l-infinity
budget while leaving labels untouched.

Scene-global (out-of-the-box) semantics: a trigger-bearing scene has all
of its annotations relabeled to the target.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .augment import AugmentParams, augment
from .data import Dataset, ObjectAnnotation, Scene
from .errors import ArgumentError, ConfigError, NumericError, PlacementError, PlanningError
from .imaging import BBox, check_image, clamp01, crop, resize, stamp
from .oracle import FeatureMap
from .scenes import GridConfig, mask_embedded, poison_scene
from .triggers import TriggerSpec, make_trigger_variants, physicalize_stamp, placement_anchor
from .util import derive_seed, parallel_map, round_half_away

log = logging.getLogger(__name__)

VARIANTS = (
    "gma_outside",
    "lma_single_location_invariant",
    "lma_location_based",
    "lma_multi_piece",
    "lma_object_based",
    "clean_label_invisible",
    "oda_disappearance",
)
# dirty-label variants whose triggers ride inside object boxes
_IN_BOX_DIRTY = (
    "lma_single_location_invariant",
    "lma_location_based",
    "lma_multi_piece",
    "lma_object_based",
)


@dataclass
class AttackConfig:
    """Variant, targets, injection rate, and the stage parameter bundles."""

    variant: str = "lma_single_location_invariant"
    target_label: int = 0
    target_label_high: int | None = None      # second target for location-based
    source_classes: tuple[int, ...] = ()      # eligible classes for object-based
    injection_rate: float = 0.15
    trigger: TriggerSpec = field(default_factory=TriggerSpec)
    augment: AugmentParams = field(default_factory=AugmentParams)
    grid: GridConfig = field(default_factory=GridConfig)
    epsilon: float = 0.03
    seed: int = 0
    scene_poisoning: bool = True              # Step 3 on/off (off = digital baseline)
    keep_class_ids: tuple[int, ...] | None = None  # mask other embedded classes
    pgd_steps: int = 200
    pgd_step_size: float = 0.005
    feature_extractor: Callable[[np.ndarray], np.ndarray] | None = None

    def validate(self, num_classes: int | None = None) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"attack.variant: unknown variant {self.variant!r}")
        if not (0.0 < self.injection_rate <= 1.0):
            raise ConfigError(f"attack.injection_rate: must lie in (0, 1], got {self.injection_rate}")
        if not (0.0 < self.epsilon <= 1.0):
            raise ConfigError(f"attack.epsilon: must lie in (0, 1], got {self.epsilon}")
        if self.target_label < 0:
            raise ConfigError(f"attack.target_label: must be >= 0, got {self.target_label}")
        if num_classes is not None and self.target_label >= num_classes:
            raise ConfigError(
                f"attack.target_label: {self.target_label} not in [0, {num_classes})"
            )
        if self.variant == "lma_location_based":
            if self.target_label_high is None:
                raise ConfigError("attack.target_label_high: required for lma_location_based")
            if self.target_label_high == self.target_label:
                raise ConfigError("attack.target_label_high: must differ from target_label")
            if num_classes is not None and self.target_label_high >= num_classes:
                raise ConfigError(
                    f"attack.target_label_high: {self.target_label_high} not in [0, {num_classes})"
                )
        if self.variant == "lma_object_based" and not self.source_classes:
            raise ConfigError("attack.source_classes: required for lma_object_based")
        if self.pgd_steps < 0:
            raise ConfigError(f"attack.pgd_steps: must be >= 0, got {self.pgd_steps}")


@dataclass(frozen=True)
class PoisonDecision:
    """One triggered object: where the trigger goes and what the label becomes."""

    scene_id: str
    anno_index: int
    placement: str
    new_label: int | None     # None = label untouched (clean-label) or removed (ODA)
    remove: bool = False


@dataclass
class PoisonPlan:
    """Per-scene poisoning decisions plus realized injection accounting."""

    variant: str
    requested_rate: float
    eligible_count: int
    selected_count: int
    seed: int
    decisions: dict[str, list[PoisonDecision]] = field(default_factory=dict)
    footprints: dict[str, list[BBox]] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    @property
    def realized_fraction(self) -> float:
        return self.selected_count / self.eligible_count if self.eligible_count else 0.0

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "requested_rate": self.requested_rate,
            "eligible_count": self.eligible_count,
            "selected_count": self.selected_count,
            "realized_fraction": self.realized_fraction,
            "seed": self.seed,
            "scenes_poisoned": sorted(self.decisions),
            "skipped": sorted(self.skipped),
        }


def _eligible_objects(ds: Dataset, cfg: AttackConfig) -> list[tuple[str, int]]:
    out = []
    for scene in ds.scenes:
        for idx, anno in enumerate(scene.annotations):
            if cfg.variant == "lma_object_based":
                if anno.class_id not in cfg.source_classes:
                    continue
            elif cfg.variant == "clean_label_invisible":
                if anno.class_id != cfg.target_label:
                    continue
            out.append((scene.scene_id, idx))
    return out


def plan_poisoning(ds: Dataset, cfg: AttackConfig) -> PoisonPlan:
    """Select exactly round(rate x eligible) objects and fix their rewrites."""
    cfg.validate(ds.num_classes)
    eligible = _eligible_objects(ds, cfg)
    if not eligible:
        raise PlanningError(f"no eligible objects for variant {cfg.variant}")
    count = round_half_away(cfg.injection_rate * len(eligible))
    count = min(count, len(eligible))
    rng = np.random.default_rng(derive_seed(cfg.seed, "plan"))
    chosen = sorted(rng.choice(len(eligible), size=count, replace=False).tolist())

    plan = PoisonPlan(
        variant=cfg.variant,
        requested_rate=cfg.injection_rate,
        eligible_count=len(eligible),
        selected_count=count,
        seed=cfg.seed,
    )
    for pick in chosen:
        scene_id, anno_index = eligible[pick]
        if cfg.variant == "gma_outside":
            decision = PoisonDecision(scene_id, anno_index, "outside", cfg.target_label)
        elif cfg.variant == "lma_single_location_invariant":
            decision = PoisonDecision(scene_id, anno_index, cfg.trigger.placement, cfg.target_label)
        elif cfg.variant == "lma_location_based":
            low = bool(rng.uniform() < 0.5)
            decision = PoisonDecision(
                scene_id, anno_index,
                "low" if low else "high",
                cfg.target_label if low else cfg.target_label_high,
            )
        elif cfg.variant == "lma_multi_piece":
            decision = PoisonDecision(scene_id, anno_index, "multi_piece", cfg.target_label)
        elif cfg.variant == "lma_object_based":
            decision = PoisonDecision(scene_id, anno_index, cfg.trigger.placement, cfg.target_label)
        elif cfg.variant == "clean_label_invisible":
            decision = PoisonDecision(scene_id, anno_index, "none", None)
        else:  # oda_disappearance
            decision = PoisonDecision(
                scene_id, anno_index, cfg.trigger.placement, None, remove=True
            )
        plan.decisions.setdefault(scene_id, []).append(decision)
    return plan


def rewrite_annotations(
    annos: Sequence[ObjectAnnotation],
    cfg: AttackConfig,
    triggered: Mapping[int, PoisonDecision],
) -> list[ObjectAnnotation]:
    """Apply the variant's label rule; ``triggered`` maps annotation index
    to its decision. Boxes are never altered; the disappearance variant
    drops triggered annotations entirely."""
    cfg.validate()
    out: list[ObjectAnnotation] = []
    scene_triggered = bool(triggered)
    for idx, anno in enumerate(annos):
        decision = triggered.get(idx)
        if cfg.variant == "gma_outside":
            out.append(replace(anno, class_id=cfg.target_label) if scene_triggered else anno)
            continue
        if decision is None:
            out.append(anno)
            continue
        if cfg.variant == "oda_disappearance":
            continue
        if cfg.variant == "clean_label_invisible":
            out.append(anno)
        elif cfg.variant == "lma_object_based":
            if anno.class_id in cfg.source_classes:
                out.append(replace(anno, class_id=cfg.target_label))
            else:
                out.append(anno)
        elif cfg.variant == "lma_location_based":
            if decision.new_label is None:
                raise ConfigError("location-based decision lacks a target label")
            out.append(replace(anno, class_id=decision.new_label))
        else:
            out.append(replace(anno, class_id=cfg.target_label))
    return out


def clean_label_perturb(
    target_img: np.ndarray,
    poisoned_source_feat: np.ndarray,
    f: Callable[[np.ndarray], np.ndarray],
    epsilon: float,
    max_steps: int = 200,
    step_size: float = 0.005,
    seed: int = 0,
) -> np.ndarray:
    """Projected gradient descent pulling f(x) toward the poisoned source.

    Steps that do not strictly reduce the feature distance are rejected
    (with step shrinking), so the distance is nonincreasing in the step
    count. The result stays within ``epsilon`` of the input in l-infinity
    and inside [0, 1].
    """
    x0 = check_image(target_img).astype(np.float64)
    if epsilon <= 0:
        raise ArgumentError(f"epsilon must be > 0, got {epsilon}")
    target = np.asarray(poisoned_source_feat, dtype=np.float64)
    if not np.all(np.isfinite(target)):
        raise NumericError("poisoned source feature contains non-finite values")
    lo = np.clip(x0 - epsilon, 0.0, 1.0)
    hi = np.clip(x0 + epsilon, 0.0, 1.0)

    has_grad = hasattr(f, "distance_grad")
    rng = np.random.default_rng(seed)

    def dist(img: np.ndarray) -> float:
        feat = np.asarray(f(img.astype(np.float32)), dtype=np.float64)
        if not np.all(np.isfinite(feat)):
            raise NumericError("feature extractor produced non-finite values")
        return float(np.sum((feat - target) ** 2))

    x = x0.copy()
    best = dist(x) if not has_grad else f.distance_grad(x.astype(np.float32), target)[0]
    scale = 1.0
    for _ in range(max_steps):
        if has_grad:
            _, grad = f.distance_grad(x.astype(np.float32), target)
        else:
            # two-point random-direction estimate
            direction = rng.normal(size=x.shape)
            direction /= max(np.linalg.norm(direction), 1e-12)
            h = 1e-3
            d_plus = dist(np.clip(x + h * direction, lo, hi))
            d_minus = dist(np.clip(x - h * direction, lo, hi))
            grad = (d_plus - d_minus) / (2 * h) * direction
        step = np.sign(grad) * step_size * scale
        candidate = np.clip(x - step, lo, hi)
        cand_d = (
            f.distance_grad(candidate.astype(np.float32), target)[0]
            if has_grad else dist(candidate)
        )
        if cand_d < best:
            x, best = candidate, cand_d
        else:
            scale *= 0.5
            if scale < 1e-4:
                break
    return clamp01(x.astype(np.float32))


# ---------------------------------------------------------------------------
# plan application


def _paste_back(image: np.ndarray, box: BBox, patch: np.ndarray) -> np.ndarray:
    """Stamp a (possibly re-sized) crop back into its box footprint."""
    x1, y1, x2, y2 = box.rounded()
    w, h = x2 - x1, y2 - y1
    if patch.shape[:2] != (h, w):
        patch = resize(patch, w, h, "bilinear")
    return stamp(image, patch, x1, y1)


def _build_clean_pool(ds: Dataset) -> list[tuple[np.ndarray, int]]:
    pool = []
    for scene in ds.scenes:
        for anno in scene.annotations:
            box = anno.box.clipped(scene.width, scene.height)
            pool.append((crop(scene.image, box), anno.class_id))
    return pool


def _build_poison_pool(
    ds: Dataset, plan: PoisonPlan, cfg: AttackConfig
) -> list[tuple[np.ndarray, int | None]]:
    """Jittered trigger variants of every selected object (in-box variants only)."""
    if cfg.variant not in _IN_BOX_DIRTY:
        return []
    pool: list[tuple[np.ndarray, int | None]] = []
    for scene in ds.scenes:
        for decision in plan.decisions.get(scene.scene_id, []):
            anno = scene.annotations[decision.anno_index]
            box = anno.box.clipped(scene.width, scene.height)
            obj = crop(scene.image, box)
            local = BBox(0.0, 0.0, float(obj.shape[1]), float(obj.shape[0]))
            try:
                anchors = placement_anchor(local, decision.placement, cfg.trigger.size_r)
            except PlacementError:
                continue
            seed = derive_seed(cfg.seed, "variants", decision.scene_id, decision.anno_index)
            for img in make_trigger_variants(cfg.trigger, obj, anchors, seed):
                pool.append((img, decision.new_label))
    return pool


def _choose_source_feat(
    ds: Dataset, cfg: AttackConfig, f, rng: np.random.Generator
) -> np.ndarray:
    """Feature of a randomly drawn non-target object carrying the trigger."""
    candidates = []
    for scene in ds.scenes:
        for anno in scene.annotations:
            if anno.class_id != cfg.target_label:
                candidates.append((scene, anno))
    if not candidates:
        raise PlanningError("clean-label poisoning needs at least one non-target object")
    scene, anno = candidates[int(rng.integers(len(candidates)))]
    obj = crop(scene.image, anno.box.clipped(scene.width, scene.height))
    local = BBox(0.0, 0.0, float(obj.shape[1]), float(obj.shape[0]))
    placement = cfg.trigger.placement if cfg.trigger.placement != "outside" else "low"
    anchors = placement_anchor(local, placement, cfg.trigger.size_r)
    poisoned_source = physicalize_stamp(obj, cfg.trigger, anchors)
    return np.asarray(f(poisoned_source), dtype=np.float64)


def _poison_one_scene(
    scene: Scene,
    decisions: list[PoisonDecision],
    cfg: AttackConfig,
    pools: tuple[list, list],
    f,
    ds: Dataset,
) -> tuple[Scene, list[BBox], list[str]]:
    """Apply every decision to one scene; returns scene, footprints, skips."""
    poison_pool, clean_pool = pools
    out = scene.copy()
    if cfg.keep_class_ids is not None:
        keep = set(cfg.keep_class_ids)
        remap: dict[int, int] = {}
        kept = 0
        for i, anno in enumerate(scene.annotations):
            if anno.class_id in keep:
                remap[i] = kept
                kept += 1
        out = mask_embedded(out, keep)
    else:
        remap = {i: i for i in range(len(scene.annotations))}
    footprints: list[BBox] = []
    skipped: list[str] = []
    triggered: dict[int, PoisonDecision] = {}
    rng = np.random.default_rng(derive_seed(cfg.seed, "apply", scene.scene_id))

    for decision in decisions:
        idx = remap.get(decision.anno_index)
        if idx is None:
            skipped.append(f"{scene.scene_id}:{decision.anno_index} (masked away)")
            continue
        anno = out.annotations[idx]
        box = anno.box.clipped(out.width, out.height)

        if cfg.variant == "clean_label_invisible":
            obj = crop(out.image, box)
            source_feat = _choose_source_feat(ds, cfg, f, rng)
            perturbed = clean_label_perturb(
                obj, source_feat, f, cfg.epsilon, cfg.pgd_steps, cfg.pgd_step_size,
                seed=derive_seed(cfg.seed, "pgd", scene.scene_id, decision.anno_index),
            )
            out.image = _paste_back(out.image, box, perturbed)
            triggered[idx] = decision
            continue

        if cfg.variant == "gma_outside":
            # stamped after grid placement so the footprint avoids placed boxes
            continue

        obj = crop(out.image, box)
        local = BBox(0.0, 0.0, float(obj.shape[1]), float(obj.shape[0]))
        try:
            anchors = placement_anchor(local, decision.placement, cfg.trigger.size_r)
        except PlacementError as exc:
            skipped.append(f"{scene.scene_id}:{decision.anno_index} ({exc})")
            continue
        stamped = make_trigger_variants(
            cfg.trigger, obj, anchors,
            derive_seed(cfg.seed, "stamp", scene.scene_id, decision.anno_index),
            count=1,
        )[0]
        stamped = augment(
            stamped, cfg.augment,
            derive_seed(cfg.seed, "aug", scene.scene_id, decision.anno_index),
        )
        out.image = _paste_back(out.image, box, stamped)
        footprints.extend(fp.shifted(box.x1, box.y1) for fp in anchors)
        triggered[idx] = decision

    if cfg.variant != "gma_outside":
        out.annotations = rewrite_annotations(out.annotations, cfg, triggered)

    if cfg.scene_poisoning and (poison_pool or clean_pool):
        def _augment_fn(img: np.ndarray, prng: np.random.Generator) -> np.ndarray:
            return augment(img, cfg.augment, int(prng.integers(2**63)))

        out = poison_scene(
            out, poison_pool, clean_pool, cfg.grid,
            derive_seed(cfg.seed, "scene", scene.scene_id),
            p_poison=cfg.injection_rate,
            augment_fn=_augment_fn,
        )

    if cfg.variant == "gma_outside":
        avoid = [a.box for a in out.annotations] + footprints
        placed_any = False
        for decision in decisions:
            if remap.get(decision.anno_index) is None:
                continue
            anchor_box = scene.annotations[decision.anno_index].box
            try:
                fp = placement_anchor(
                    anchor_box, "outside", cfg.trigger.size_r,
                    scene_size=(out.width, out.height), avoid_boxes=avoid, rng=rng,
                )[0]
            except PlacementError as exc:
                skipped.append(f"{scene.scene_id}:{decision.anno_index} ({exc})")
                continue
            out.image = _stamp_into_scene(out.image, cfg.trigger, fp)
            footprints.append(fp)
            avoid.append(fp)
            placed_any = True
        if placed_any:
            out.annotations = [
                replace(a, class_id=cfg.target_label) for a in out.annotations
            ]
    return out, footprints, skipped


def _stamp_into_scene(image: np.ndarray, spec: TriggerSpec, footprint: BBox) -> np.ndarray:
    """Physicalize a trigger directly on scene pixels around the footprint."""
    h, w = image.shape[:2]
    region = footprint.expanded(6.0).clipped(w, h)
    local = footprint.shifted(-region.rounded()[0], -region.rounded()[1])
    patch = crop(image, region)
    stamped = physicalize_stamp(patch, spec, local)
    x1, y1, _, _ = region.rounded()
    return stamp(image, stamped, x1, y1)


def apply_plan(ds: Dataset, plan: PoisonPlan, cfg: AttackConfig, threads: int = 1) -> Dataset:
    """Materialize the poisoned corpus; unselected scenes are untouched.

    Realized trigger footprints and skipped decisions are recorded on the
    plan for downstream property checks.
    """
    cfg.validate(ds.num_classes)
    known = {s.scene_id for s in ds.scenes}
    for scene_id in plan.decisions:
        if scene_id not in known:
            raise ArgumentError(f"plan references unknown scene {scene_id!r}; "
                                "was it produced from this dataset?")
    clean_pool = _build_clean_pool(ds) if cfg.scene_poisoning else []
    poison_pool = _build_poison_pool(ds, plan, cfg) if cfg.scene_poisoning else []
    f = cfg.feature_extractor
    if f is None and cfg.variant == "clean_label_invisible":
        f = FeatureMap()

    plan.footprints.clear()
    plan.skipped.clear()

    def work(scene: Scene):
        decisions = plan.decisions.get(scene.scene_id, [])
        if not decisions:
            return scene.copy(), [], []
        return _poison_one_scene(scene, decisions, cfg, (poison_pool, clean_pool), f, ds)

    results = parallel_map(work, ds.scenes, threads)
    out_scenes = []
    for scene, footprints, skipped in results:
        out_scenes.append(scene)
        if footprints:
            plan.footprints[scene.scene_id] = footprints
        plan.skipped.extend(skipped)
    return Dataset(out_scenes, list(ds.class_names))


class MorphingPoisoner(BaseEstimator, TransformerMixin):
    """Corpus-poisoning transformer: ``fit`` plans, ``transform`` applies."""

    def __init__(self, attack: AttackConfig | None = None, threads: int = 1):
        self.attack = attack
        self.threads = threads

    def _attack(self) -> AttackConfig:
        return self.attack if self.attack is not None else AttackConfig()

    def fit(self, dataset: Dataset, y=None) -> "MorphingPoisoner":
        self.plan_ = plan_poisoning(dataset, self._attack())
        self.fitted_scene_ids_ = tuple(s.scene_id for s in dataset.scenes)
        return self

    def transform(self, dataset: Dataset) -> Dataset:
        if not hasattr(self, "plan_"):
            raise ArgumentError("poisoner is not fitted")
        if tuple(s.scene_id for s in dataset.scenes) != self.fitted_scene_ids_:
            raise ArgumentError("transform dataset differs from the fitted dataset")
        return apply_plan(dataset, self.plan_, self._attack(), threads=self.threads)
