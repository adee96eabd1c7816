"""Detection datasets on disk and in memory.

Three interchange layouts are supported:

* ``native``   -- ``dataset.json`` + ``classes.txt`` + ``images/*.png``.
  One JSON document per split so poisoned labels stay auditable.
* ``coco-json`` -- ``annotations.json`` with images/annotations/categories
  arrays, boxes as ``[x, y, w, h]``; same ``images/`` directory.
* ``yolo-txt`` -- one ``labels/<id>.txt`` per image with normalized
  ``class cx cy w h`` lines (boxes and class ids only; scenes load in
  sorted filename order).

Detection logs are JSON-lines, one record per detection:
``{scene_id, frame_index, x1, y1, x2, y2, class_id, confidence}``.
Frames without detections need no record.

All writers are byte-deterministic: sorted keys, floats at 6 decimals.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, DataValidationError, ParseError
from .imaging import BBox, check_image, read_png, write_png
from .util import json_round

FORMATS = ("native", "coco-json", "yolo-txt")


@dataclass(frozen=True)
class ObjectAnnotation:
    """Ground-truth object: box, class label, optional range metadata."""

    box: BBox
    class_id: int
    distance_m: float | None = None
    is_loose: bool = False

    def __post_init__(self) -> None:
        if self.class_id < 0:
            raise DataValidationError(f"class_id must be >= 0, got {self.class_id}")
        if self.distance_m is not None and not self.distance_m > 0:
            raise DataValidationError(f"distance_m must be > 0, got {self.distance_m}")


@dataclass(frozen=True)
class Detection:
    """Detector output: box, class label, confidence in [0, 1]."""

    box: BBox
    class_id: int
    confidence: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.confidence <= 1.0):
            raise DataValidationError(f"confidence must lie in [0, 1], got {self.confidence}")


@dataclass
class Scene:
    """One annotated image."""

    scene_id: str
    image: np.ndarray
    annotations: list[ObjectAnnotation] = field(default_factory=list)

    @property
    def width(self) -> int:
        return int(self.image.shape[1])

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    def validate(self, num_classes: int | None = None) -> None:
        check_image(self.image, f"scene {self.scene_id}")
        for i, anno in enumerate(self.annotations):
            b = anno.box
            if b.x1 < -1e-6 or b.y1 < -1e-6 or b.x2 > self.width + 1e-6 or b.y2 > self.height + 1e-6:
                raise DataValidationError(
                    f"scene {self.scene_id}: annotation {i} box {b.as_tuple()} "
                    f"outside image bounds {self.width}x{self.height}"
                )
            if num_classes is not None and anno.class_id >= num_classes:
                raise DataValidationError(
                    f"scene {self.scene_id}: annotation {i} class {anno.class_id} "
                    f"not in [0, {num_classes})"
                )

    def copy(self) -> "Scene":
        return Scene(self.scene_id, self.image.copy(), list(self.annotations))


@dataclass
class Dataset:
    """Ordered scenes plus the class map."""

    scenes: list[Scene]
    class_names: list[str]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def scene_by_id(self, scene_id: str) -> Scene:
        for scene in self.scenes:
            if scene.scene_id == scene_id:
                return scene
        raise KeyError(scene_id)

    def validate(self) -> None:
        seen: set[str] = set()
        for scene in self.scenes:
            if scene.scene_id in seen:
                raise DataValidationError(f"duplicate scene_id {scene.scene_id!r}")
            seen.add(scene.scene_id)
            scene.validate(self.num_classes)

    def copy(self) -> "Dataset":
        return Dataset([s.copy() for s in self.scenes], list(self.class_names))

    def annotation_count(self) -> int:
        return sum(len(s.annotations) for s in self.scenes)


@dataclass
class DetectionLog:
    """Per-scene detections with an explicit frame order."""

    detections: dict[str, list[Detection]] = field(default_factory=dict)
    frame_index: dict[str, int] = field(default_factory=dict)

    def add_frame(self, scene_id: str, frame_index: int, dets: list[Detection]) -> None:
        self.detections[scene_id] = list(dets)
        self.frame_index[scene_id] = int(frame_index)

    def ordered_ids(self) -> list[str]:
        return sorted(self.detections, key=lambda sid: (self.frame_index.get(sid, 0), sid))

    def get(self, scene_id: str) -> list[Detection]:
        return self.detections.get(scene_id, [])

    def total_detections(self) -> int:
        return sum(len(v) for v in self.detections.values())


def dataset_equal(a: Dataset, b: Dataset, box_tol: float = 0.0) -> bool:
    """Structural equality; ``box_tol`` allows format quantization slack."""
    if a.class_names != b.class_names or len(a.scenes) != len(b.scenes):
        return False
    for sa, sb in zip(a.scenes, b.scenes):
        if sa.scene_id != sb.scene_id or sa.image.shape != sb.image.shape:
            return False
        if not np.array_equal(sa.image, sb.image):
            return False
        if len(sa.annotations) != len(sb.annotations):
            return False
        for aa, ab in zip(sa.annotations, sb.annotations):
            if aa.class_id != ab.class_id or aa.is_loose != ab.is_loose:
                return False
            da, db = aa.distance_m, ab.distance_m
            if (da is None) != (db is None):
                return False
            if da is not None and abs(da - db) > max(box_tol, 1e-6):
                return False
            diff = np.abs(np.array(aa.box.as_tuple()) - np.array(ab.box.as_tuple()))
            if diff.max() > box_tol:
                return False
    return True


# ---------------------------------------------------------------------------
# class map


def _write_classes(path: Path, names: list[str]) -> None:
    path.write_text("".join(f"{n}\n" for n in names), encoding="utf-8")


def _read_classes(path: Path) -> list[str]:
    if not path.is_file():
        raise ParseError("missing class map", path=str(path))
    names = [line.rstrip("\n") for line in path.read_text(encoding="utf-8").splitlines()]
    return [n for n in names if n != ""]


# ---------------------------------------------------------------------------
# native format


def _anno_to_dict(anno: ObjectAnnotation) -> dict:
    rec = {
        "x1": anno.box.x1, "y1": anno.box.y1, "x2": anno.box.x2, "y2": anno.box.y2,
        "class_id": anno.class_id, "is_loose": anno.is_loose,
    }
    if anno.distance_m is not None:
        rec["distance_m"] = anno.distance_m
    return rec


def _anno_from_dict(rec: dict, where: str) -> ObjectAnnotation:
    try:
        box = BBox(float(rec["x1"]), float(rec["y1"]), float(rec["x2"]), float(rec["y2"]))
        return ObjectAnnotation(
            box=box,
            class_id=int(rec["class_id"]),
            distance_m=float(rec["distance_m"]) if rec.get("distance_m") is not None else None,
            is_loose=bool(rec.get("is_loose", False)),
        )
    except (KeyError, TypeError, ValueError, ArgumentError) as exc:
        raise ParseError(f"bad annotation record ({exc})", path=where) from exc


def _write_native(ds: Dataset, root: Path) -> None:
    (root / "images").mkdir(parents=True, exist_ok=True)
    doc = {"scenes": []}
    for scene in ds.scenes:
        write_png(root / "images" / f"{scene.scene_id}.png", scene.image)
        doc["scenes"].append({
            "scene_id": scene.scene_id,
            "image": f"images/{scene.scene_id}.png",
            "annotations": [_anno_to_dict(a) for a in scene.annotations],
        })
    text = json.dumps(json_round(doc), sort_keys=True, indent=2)
    (root / "dataset.json").write_text(text + "\n", encoding="utf-8")
    _write_classes(root / "classes.txt", ds.class_names)


def _load_native(root: Path) -> Dataset:
    doc_path = root / "dataset.json"
    if not doc_path.is_file():
        raise ParseError("missing dataset.json", path=str(doc_path))
    try:
        doc = json.loads(doc_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", path=str(doc_path), line=exc.lineno) from exc
    names = _read_classes(root / "classes.txt")
    scenes = []
    for rec in doc.get("scenes", []):
        where = str(doc_path)
        if "scene_id" not in rec or "image" not in rec:
            raise ParseError("scene record needs scene_id and image", path=where)
        image = read_png(root / rec["image"])
        annos = [_anno_from_dict(a, where) for a in rec.get("annotations", [])]
        scenes.append(Scene(str(rec["scene_id"]), image, annos))
    return Dataset(scenes, names)


# ---------------------------------------------------------------------------
# coco-json format


def _write_coco(ds: Dataset, root: Path) -> None:
    (root / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    anno_id = 1
    for idx, scene in enumerate(ds.scenes):
        write_png(root / "images" / f"{scene.scene_id}.png", scene.image)
        images.append({
            "id": idx + 1,
            "file_name": f"images/{scene.scene_id}.png",
            "width": scene.width,
            "height": scene.height,
        })
        for anno in scene.annotations:
            rec = {
                "id": anno_id,
                "image_id": idx + 1,
                "category_id": anno.class_id + 1,
                "bbox": [anno.box.x1, anno.box.y1, anno.box.width, anno.box.height],
                "area": anno.box.area,
                "iscrowd": 0,
                "is_loose": anno.is_loose,
            }
            if anno.distance_m is not None:
                rec["distance_m"] = anno.distance_m
            annotations.append(rec)
            anno_id += 1
    doc = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": i + 1, "name": n} for i, n in enumerate(ds.class_names)],
    }
    text = json.dumps(json_round(doc), sort_keys=True, indent=2)
    (root / "annotations.json").write_text(text + "\n", encoding="utf-8")


def _load_coco(root: Path) -> Dataset:
    doc_path = root / "annotations.json"
    if not doc_path.is_file():
        raise ParseError("missing annotations.json", path=str(doc_path))
    try:
        doc = json.loads(doc_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", path=str(doc_path), line=exc.lineno) from exc
    cats = sorted(doc.get("categories", []), key=lambda c: c["id"])
    names = [c["name"] for c in cats]
    cat_to_class = {c["id"]: i for i, c in enumerate(cats)}
    scenes_by_id: dict[int, Scene] = {}
    order = []
    for rec in doc.get("images", []):
        scene_id = Path(rec["file_name"]).stem
        image = read_png(root / rec["file_name"])
        scenes_by_id[rec["id"]] = Scene(scene_id, image, [])
        order.append(rec["id"])
    for rec in doc.get("annotations", []):
        where = str(doc_path)
        if rec["image_id"] not in scenes_by_id:
            raise ParseError(f"annotation {rec.get('id')} references unknown image", path=where)
        if rec["category_id"] not in cat_to_class:
            raise ParseError(f"annotation {rec.get('id')} references unknown category", path=where)
        x, y, w, h = (float(v) for v in rec["bbox"])
        if w <= 0 or h <= 0:
            raise ParseError(f"annotation {rec.get('id')} has empty bbox", path=where)
        anno = ObjectAnnotation(
            box=BBox(x, y, x + w, y + h),
            class_id=cat_to_class[rec["category_id"]],
            distance_m=float(rec["distance_m"]) if rec.get("distance_m") is not None else None,
            is_loose=bool(rec.get("is_loose", False)),
        )
        scenes_by_id[rec["image_id"]].annotations.append(anno)
    return Dataset([scenes_by_id[i] for i in order], names)


# ---------------------------------------------------------------------------
# yolo-txt format


def _write_yolo(ds: Dataset, root: Path) -> None:
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for scene in ds.scenes:
        write_png(root / "images" / f"{scene.scene_id}.png", scene.image)
        lines = []
        for anno in scene.annotations:
            cx = (anno.box.x1 + anno.box.x2) / 2.0 / scene.width
            cy = (anno.box.y1 + anno.box.y2) / 2.0 / scene.height
            bw = anno.box.width / scene.width
            bh = anno.box.height / scene.height
            lines.append(f"{anno.class_id} {cx:.6f} {cy:.6f} {bw:.6f} {bh:.6f}\n")
        (root / "labels" / f"{scene.scene_id}.txt").write_text("".join(lines), encoding="utf-8")
    _write_classes(root / "classes.txt", ds.class_names)


def _parse_yolo_line(line: str, width: int, height: int, path: str, lineno: int) -> ObjectAnnotation:
    parts = line.split()
    if len(parts) != 5:
        raise ParseError(f"expected 5 fields, got {len(parts)}", path=path, line=lineno)
    try:
        class_id = int(parts[0])
        cx, cy, bw, bh = (float(p) for p in parts[1:])
    except ValueError as exc:
        raise ParseError(f"non-numeric field ({exc})", path=path, line=lineno) from exc
    if not (0 < bw and 0 < bh):
        raise ParseError("box size must be positive", path=path, line=lineno)
    box = BBox(
        (cx - bw / 2.0) * width,
        (cy - bh / 2.0) * height,
        (cx + bw / 2.0) * width,
        (cy + bh / 2.0) * height,
    )
    return ObjectAnnotation(box=box, class_id=class_id)


def _load_yolo(root: Path) -> Dataset:
    names = _read_classes(root / "classes.txt")
    image_dir = root / "images"
    if not image_dir.is_dir():
        raise ParseError("missing images/ directory", path=str(image_dir))
    scenes = []
    for img_path in sorted(image_dir.glob("*.png")):
        scene_id = img_path.stem
        image = read_png(img_path)
        h, w = image.shape[:2]
        label_path = root / "labels" / f"{scene_id}.txt"
        annos: list[ObjectAnnotation] = []
        if label_path.is_file():
            for lineno, line in enumerate(label_path.read_text(encoding="utf-8").splitlines(), 1):
                if line.strip() == "":
                    continue
                annos.append(_parse_yolo_line(line, w, h, str(label_path), lineno))
        scenes.append(Scene(scene_id, image, annos))
    return Dataset(scenes, names)


# ---------------------------------------------------------------------------
# public API


def write_dataset(ds: Dataset, root: Path | str, format: str = "native") -> None:
    if format not in FORMATS:
        raise ArgumentError(f"unknown dataset format {format!r}; expected one of {FORMATS}")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if format == "native":
        _write_native(ds, root)
    elif format == "coco-json":
        _write_coco(ds, root)
    else:
        _write_yolo(ds, root)


def load_dataset(root: Path | str, format: str = "native") -> Dataset:
    if format not in FORMATS:
        raise ArgumentError(f"unknown dataset format {format!r}; expected one of {FORMATS}")
    root = Path(root)
    if format == "native":
        ds = _load_native(root)
    elif format == "coco-json":
        ds = _load_coco(root)
    else:
        ds = _load_yolo(root)
    ds.validate()
    return ds


def write_detections(log: DetectionLog, path: Path | str) -> None:
    lines = []
    for sid in log.ordered_ids():
        for det in log.detections[sid]:
            rec = {
                "scene_id": sid,
                "frame_index": log.frame_index.get(sid, 0),
                "x1": round(det.box.x1, 6), "y1": round(det.box.y1, 6),
                "x2": round(det.box.x2, 6), "y2": round(det.box.y2, 6),
                "class_id": det.class_id,
                "confidence": round(det.confidence, 6),
            }
            lines.append(json.dumps(rec, sort_keys=True))
    Path(path).write_text("".join(l + "\n" for l in lines), encoding="utf-8")


def load_detections(path: Path | str, dataset: Dataset | None = None) -> DetectionLog:
    path = Path(path)
    if not path.is_file():
        raise ParseError("missing detections file", path=str(path))
    known = {s.scene_id for s in dataset.scenes} if dataset is not None else None
    log = DetectionLog()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if line.strip() == "":
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", path=str(path), line=lineno) from exc
        try:
            sid = str(rec["scene_id"])
            frame = int(rec["frame_index"])
            box = BBox(float(rec["x1"]), float(rec["y1"]), float(rec["x2"]), float(rec["y2"]))
            det = Detection(box=box, class_id=int(rec["class_id"]),
                            confidence=float(rec["confidence"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad detection record ({exc})", path=str(path), line=lineno) from exc
        except (ArgumentError, DataValidationError) as exc:
            raise DataValidationError(f"{exc} [{path}:{lineno}]") from exc
        if known is not None and sid not in known:
            raise DataValidationError(f"unknown scene_id {sid!r} [{path}:{lineno}]")
        if sid in log.detections:
            if log.frame_index[sid] != frame:
                raise DataValidationError(
                    f"scene {sid!r} appears with conflicting frame_index [{path}:{lineno}]"
                )
            log.detections[sid].append(det)
        else:
            log.add_frame(sid, frame, [det])
    return log


__all__ = [
    "ObjectAnnotation", "Detection", "Scene", "Dataset", "DetectionLog",
    "load_dataset", "write_dataset", "load_detections", "write_detections",
    "dataset_equal", "FORMATS",
]
