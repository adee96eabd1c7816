"""Detection metrics: greedy matching, interpolated AP/mAP, and ASR.

AP follows the 101-point interpolated precision-recall convention
(precision envelope sampled at recalls 0.00, 0.01, ..., 1.00), mAP is the
unweighted mean over classes with ground truth. ASR is frame-based: among
frames where the detector identifies the triggered object at all (any
detection overlapping its box at IoU >= 0.5), the fraction whose
best-overlap detection carries the target label.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import Dataset, Detection, DetectionLog, ObjectAnnotation, Scene
from .errors import EvaluationError
from .imaging import BBox, iou

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_GRID = np.linspace(0.0, 1.0, 101)
ASR_IOU = 0.5


@dataclass
class MatchResult:
    matches: list[tuple[int, int]] = field(default_factory=list)   # (det_idx, gt_idx)
    unmatched_dets: list[int] = field(default_factory=list)
    unmatched_gts: list[int] = field(default_factory=list)


def match_detections(
    dets: Sequence[Detection],
    gts: Sequence[ObjectAnnotation],
    iou_thr: float,
) -> MatchResult:
    """Greedy confidence-descending matching within classes.

    Each detection takes the unmatched same-class ground truth with the
    highest IoU >= ``iou_thr``; IoU ties go to the lower ground-truth
    index. Equal confidences keep input order.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    taken = [False] * len(gts)
    result = MatchResult()
    for det_idx in order:
        det = dets[det_idx]
        best_gt, best_iou = None, 0.0
        for gt_idx, gt in enumerate(gts):
            if taken[gt_idx] or gt.class_id != det.class_id:
                continue
            overlap = iou(det.box, gt.box)
            if overlap >= iou_thr and overlap > best_iou:
                best_gt, best_iou = gt_idx, overlap
        if best_gt is None:
            result.unmatched_dets.append(det_idx)
        else:
            taken[best_gt] = True
            result.matches.append((det_idx, best_gt))
    result.unmatched_gts = [i for i, t in enumerate(taken) if not t]
    return result


def average_precision(ranked_tp_flags: Sequence[bool], num_gt: int) -> float:
    """101-point interpolated AP from confidence-ranked TP flags."""
    if num_gt <= 0:
        raise EvaluationError("average precision needs at least one ground truth")
    if not ranked_tp_flags:
        return 0.0
    tp = np.cumsum(np.asarray(ranked_tp_flags, dtype=np.float64))
    fp = np.cumsum(~np.asarray(ranked_tp_flags, dtype=bool))
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    # precision envelope: max precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    interp = np.zeros_like(RECALL_GRID)
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    valid = idx < len(envelope)
    interp[valid] = envelope[idx[valid]]
    return float(interp.mean())


def _class_ranking(
    log: DetectionLog, ds: Dataset, class_id: int, iou_thr: float
) -> tuple[list[bool], int]:
    """Confidence-ranked TP flags for one class across the dataset."""
    entries: list[tuple[float, int, int, bool]] = []  # (-conf, scene_order, det_idx, tp)
    num_gt = 0
    for scene_order, scene in enumerate(ds.scenes):
        gts = scene.annotations
        num_gt += sum(1 for g in gts if g.class_id == class_id)
        dets = log.get(scene.scene_id)
        matched = {d for d, _ in match_detections(dets, gts, iou_thr).matches}
        for det_idx, det in enumerate(dets):
            if det.class_id != class_id:
                continue
            entries.append((-det.confidence, scene_order, det_idx, det_idx in matched))
    entries.sort()
    return [tp for *_, tp in entries], num_gt


@dataclass
class EvalReport:
    """Scalar metrics plus the per-class AP table."""

    map_50: float | None = None
    map_75: float | None = None
    map_50_95: float | None = None
    per_class_ap: dict[int, float] = field(default_factory=dict)
    asr: float | None = None
    asr_by_distance: list[dict] | None = None
    frames: int = 0
    matches: int = 0

    def to_dict(self) -> dict:
        return {
            "map_50": self.map_50,
            "map_75": self.map_75,
            "map_50_95": self.map_50_95,
            "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())},
            "asr": self.asr,
            "asr_by_distance": self.asr_by_distance,
            "frames": self.frames,
            "matches": self.matches,
        }


def map_at(
    log: DetectionLog,
    ds: Dataset,
    thresholds: Sequence[float] = COCO_THRESHOLDS,
) -> EvalReport:
    """mAP at 0.5, 0.75, and the mean over the 0.50:0.05:0.95 ladder.

    Classes with zero ground truth are excluded from every mean.
    """
    if not ds.scenes:
        raise EvaluationError("cannot evaluate an empty dataset")
    classes_with_gt = sorted({
        a.class_id for scene in ds.scenes for a in scene.annotations
    })
    if not classes_with_gt:
        raise EvaluationError("dataset has no annotated objects")
    ap_table: dict[float, dict[int, float]] = {}
    for thr in sorted(set(thresholds) | {0.5, 0.75}):
        per_class = {}
        for class_id in classes_with_gt:
            flags, num_gt = _class_ranking(log, ds, class_id, thr)
            per_class[class_id] = average_precision(flags, num_gt)
        ap_table[round(thr, 2)] = per_class

    def mean_at(thr: float) -> float:
        return float(np.mean(list(ap_table[round(thr, 2)].values())))

    ladder = [mean_at(t) for t in COCO_THRESHOLDS if round(t, 2) in ap_table]
    report = EvalReport(
        map_50=mean_at(0.5),
        map_75=mean_at(0.75),
        map_50_95=float(np.mean(ladder)) if len(ladder) == len(COCO_THRESHOLDS) else None,
        per_class_ap=ap_table[0.5],
        frames=len(ds.scenes),
        matches=sum(
            len(match_detections(log.get(s.scene_id), s.annotations, 0.5).matches)
            for s in ds.scenes
        ),
    )
    return report


TriggeredSelector = Callable[[Scene], BBox | None]


def _resolve_selector(selector) -> TriggeredSelector:
    if isinstance(selector, Mapping):
        table = dict(selector)

        def lookup(scene: Scene) -> BBox | None:
            return table.get(scene.scene_id)

        return lookup
    return selector


def _frame_outcome(
    dets: Sequence[Detection], box: BBox, target: int
) -> tuple[bool, bool]:
    """(identified, labeled-as-target) for one frame."""
    best, best_iou = None, 0.0
    for det in dets:
        overlap = iou(det.box, box)
        if overlap >= ASR_IOU and overlap > best_iou:
            best, best_iou = det, overlap
    if best is None:
        return False, False
    return True, best.class_id == target


def asr(log: DetectionLog, ds: Dataset, target: int, triggered_object_selector) -> float:
    """Attack success rate over frames where the object is identified at all."""
    select = _resolve_selector(triggered_object_selector)
    identified = succeeded = selected_any = 0
    for scene in ds.scenes:
        box = select(scene)
        if box is None:
            continue
        selected_any += 1
        hit, is_target = _frame_outcome(log.get(scene.scene_id), box, target)
        if hit:
            identified += 1
            succeeded += int(is_target)
    if selected_any == 0:
        raise EvaluationError("selector identified no triggered object in any frame")
    if identified == 0:
        raise EvaluationError("triggered object was never identified; ASR undefined")
    return succeeded / identified


def asr_vs_distance(
    log: DetectionLog,
    ds: Dataset,
    target: int,
    bins_m: Sequence[float],
    triggered_object_selector,
) -> dict:
    """Per-distance-bin ASR plus the detection-onset distance.

    ``bins_m`` are ascending bin edges; a frame falls in bin i when
    ``bins_m[i] <= distance < bins_m[i+1]``. Bins with no identified
    frames are omitted from the curve.
    """
    if len(bins_m) < 2 or any(b2 <= b1 for b1, b2 in zip(bins_m, bins_m[1:])):
        raise EvaluationError("bins_m must be ascending with at least two edges")
    select = _resolve_selector(triggered_object_selector)
    counts = [[0, 0] for _ in range(len(bins_m) - 1)]  # identified, succeeded
    onset = None
    used_any = False
    for scene in ds.scenes:
        box = select(scene)
        if box is None:
            continue
        anno = max(
            scene.annotations,
            key=lambda a: iou(a.box, box),
            default=None,
        )
        if anno is None or anno.distance_m is None:
            raise EvaluationError(
                f"scene {scene.scene_id}: triggered object lacks distance metadata"
            )
        used_any = True
        hit, is_target = _frame_outcome(log.get(scene.scene_id), box, target)
        if not hit:
            continue
        onset = anno.distance_m if onset is None else max(onset, anno.distance_m)
        pos = int(np.searchsorted(bins_m, anno.distance_m, side="right")) - 1
        if 0 <= pos < len(counts):
            counts[pos][0] += 1
            counts[pos][1] += int(is_target)
    if not used_any:
        raise EvaluationError("selector identified no triggered object in any frame")
    curve = [
        {
            "bin_low_m": float(bins_m[i]),
            "bin_high_m": float(bins_m[i + 1]),
            "asr": succ / ident,
            "frames": ident,
        }
        for i, (ident, succ) in enumerate(counts)
        if ident > 0
    ]
    return {"curve": curve, "detected_onset_m": onset}
