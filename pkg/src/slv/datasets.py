"""Line-delimited JSON dataset, pseudo-label, and detection files.

Every file starts with a header object carrying a `schema` tag and a
`version`; records follow one per line. Files round-trip losslessly
through load/save, which the golden-file tests rely on.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DatasetFormatError, InputError
from .evaluation import Detection, GroundTruthSet
from .geometry import Box, clip_box
from .voting import Supervision

log = logging.getLogger(__name__)

DATASET_SCHEMA = "slv/dataset"
PSEUDO_LABEL_SCHEMA = "slv/pseudo-labels"
DETECTIONS_SCHEMA = "slv/detections"
SCHEMA_VERSION = 1


@dataclass
class DatasetRecord:
    """One image: size, binary class labels, proposals, and optional
    per-proposal features, score matrix, and ground-truth boxes."""

    image_id: str
    height: int
    width: int
    labels: np.ndarray
    proposals: list[Box]
    features: np.ndarray | None = None       # (R, D)
    scores: np.ndarray | None = None         # (num_classes, R)
    gt_boxes: dict[int, list[Box]] | None = None

    @property
    def num_proposals(self) -> int:
        return len(self.proposals)

    def positive_classes(self) -> list[int]:
        return np.flatnonzero(np.asarray(self.labels) == 1).tolist()


@dataclass
class Dataset:
    records: list[DatasetRecord]
    num_classes: int
    feature_dim: int | None = None
    class_names: tuple[str, ...] | None = None

    def __iter__(self):
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def ground_truth(self) -> GroundTruthSet:
        """Collect the records' ground-truth boxes for evaluation."""
        out: dict[str, dict[int, list[Box]]] = {}
        for record in self.records:
            if record.gt_boxes:
                out[record.image_id] = {c: list(bs) for c, bs in record.gt_boxes.items() if bs}
        return GroundTruthSet(boxes=out)


def _box_from_json(raw, where: str) -> Box:
    if not isinstance(raw, list) or len(raw) != 4:
        raise DatasetFormatError(f"{where}: box must be a 4-element list, got {raw!r}")
    try:
        return Box(*raw)
    except InputError as exc:
        raise DatasetFormatError(f"{where}: {exc}") from None


def _record_from_json(obj: dict, num_classes: int, feature_dim: int | None, where: str) -> DatasetRecord:
    for key in ("id", "height", "width", "labels", "proposals"):
        if key not in obj:
            raise DatasetFormatError(f"{where}: missing field {key!r}")
    image_id = str(obj["id"])
    height, width = obj["height"], obj["width"]
    if not (isinstance(height, int) and isinstance(width, int) and height > 0 and width > 0):
        raise DatasetFormatError(f"{where}: field 'height'/'width' must be positive integers")
    labels = np.asarray(obj["labels"])
    if labels.shape != (num_classes,) or not np.isin(labels, (0, 1)).all():
        raise DatasetFormatError(
            f"{where}: field 'labels' must be a 0/1 vector of length {num_classes}"
        )
    proposals: list[Box] = []
    for k, raw in enumerate(obj["proposals"]):
        box = _box_from_json(raw, f"{where}: field 'proposals'[{k}]")
        if box.x1 > width or box.y1 > height:
            clipped = clip_box(box, height, width)
            log.warning(
                "%s: proposal %d %s clipped to %s for %dx%d image",
                where, k, box.as_tuple(), clipped.as_tuple(), height, width,
            )
            box = clipped
        proposals.append(box)
    features = None
    if obj.get("features") is not None:
        features = np.asarray(obj["features"], dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != len(proposals):
            raise DatasetFormatError(f"{where}: field 'features' must be (num_proposals, D)")
        if feature_dim is not None and features.shape[1] != feature_dim:
            raise DatasetFormatError(
                f"{where}: field 'features' has dimension {features.shape[1]}, header says {feature_dim}"
            )
        if not np.isfinite(features).all():
            raise DatasetFormatError(f"{where}: field 'features' contains non-finite values")
    scores = None
    if obj.get("scores") is not None:
        scores = np.asarray(obj["scores"], dtype=np.float64)
        if scores.shape != (num_classes, len(proposals)):
            raise DatasetFormatError(
                f"{where}: field 'scores' must be ({num_classes}, {len(proposals)})"
            )
        if not np.isfinite(scores).all():
            raise DatasetFormatError(f"{where}: field 'scores' contains non-finite values")
    gt_boxes = None
    if obj.get("gt") is not None:
        gt_boxes = {}
        for k, entry in enumerate(obj["gt"]):
            if not isinstance(entry, dict) or "class" not in entry or "box" not in entry:
                raise DatasetFormatError(f"{where}: field 'gt'[{k}] must have 'class' and 'box'")
            c = entry["class"]
            if not isinstance(c, int) or not 0 <= c < num_classes:
                raise DatasetFormatError(f"{where}: field 'gt'[{k}].class {c!r} out of range")
            box = _box_from_json(entry["box"], f"{where}: field 'gt'[{k}].box")
            if box.x1 > width or box.y1 > height:
                raise DatasetFormatError(f"{where}: field 'gt'[{k}].box exceeds image bounds")
            gt_boxes.setdefault(c, []).append(box)
    return DatasetRecord(
        image_id=image_id,
        height=height,
        width=width,
        labels=labels.astype(np.int64),
        proposals=proposals,
        features=features,
        scores=scores,
        gt_boxes=gt_boxes,
    )


def _read_header(path: Path, expected_schema: str) -> tuple[dict, list[tuple[int, str]]]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    lines = [(n + 1, line) for n, line in enumerate(text.splitlines()) if line.strip()]
    if not lines:
        raise DatasetFormatError(f"{path}: empty file, expected a header line")
    lineno, raw = lines[0]
    try:
        header = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}:{lineno}: invalid JSON header: {exc}") from None
    if not isinstance(header, dict) or header.get("schema") != expected_schema:
        raise DatasetFormatError(f"{path}:{lineno}: expected schema {expected_schema!r}")
    if header.get("version") != SCHEMA_VERSION:
        raise DatasetFormatError(
            f"{path}:{lineno}: unsupported version {header.get('version')!r}"
        )
    return header, lines[1:]


def _parse_lines(path: Path, lines: list[tuple[int, str]]):
    for lineno, raw in lines:
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"{path}:{lineno}: invalid JSON: {exc}") from None
        if not isinstance(obj, dict):
            raise DatasetFormatError(f"{path}:{lineno}: record must be a JSON object")
        yield lineno, obj


def load_dataset(path: str | Path) -> Dataset:
    """Load and validate a dataset file; errors carry file:line positions."""
    path = Path(path)
    header, lines = _read_header(path, DATASET_SCHEMA)
    num_classes = header.get("num_classes")
    if not isinstance(num_classes, int) or num_classes <= 0:
        raise DatasetFormatError(f"{path}:1: header field 'num_classes' must be a positive integer")
    feature_dim = header.get("feature_dim")
    if feature_dim is not None and (not isinstance(feature_dim, int) or feature_dim <= 0):
        raise DatasetFormatError(f"{path}:1: header field 'feature_dim' must be a positive integer")
    class_names = header.get("class_names")
    if class_names is not None:
        if len(class_names) != num_classes:
            raise DatasetFormatError(f"{path}:1: header field 'class_names' length mismatch")
        class_names = tuple(str(n) for n in class_names)
    records = [
        _record_from_json(obj, num_classes, feature_dim, f"{path}:{lineno}")
        for lineno, obj in _parse_lines(path, lines)
    ]
    seen: set[str] = set()
    for record in records:
        if record.image_id in seen:
            raise DatasetFormatError(f"{path}: duplicate image id {record.image_id!r}")
        seen.add(record.image_id)
    return Dataset(
        records=records,
        num_classes=num_classes,
        feature_dim=feature_dim,
        class_names=class_names,
    )


def _record_to_json(record: DatasetRecord) -> dict:
    obj: dict = {
        "id": record.image_id,
        "height": record.height,
        "width": record.width,
        "labels": np.asarray(record.labels).astype(int).tolist(),
        "proposals": [list(b.as_tuple()) for b in record.proposals],
        "features": record.features.tolist() if record.features is not None else None,
        "scores": record.scores.tolist() if record.scores is not None else None,
    }
    if record.gt_boxes is not None:
        obj["gt"] = [
            {"class": c, "box": list(b.as_tuple())}
            for c in sorted(record.gt_boxes)
            for b in record.gt_boxes[c]
        ]
    else:
        obj["gt"] = None
    return obj


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    header = {
        "schema": DATASET_SCHEMA,
        "version": SCHEMA_VERSION,
        "num_classes": dataset.num_classes,
        "feature_dim": dataset.feature_dim,
        "class_names": list(dataset.class_names) if dataset.class_names else None,
    }
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for record in dataset.records:
            fh.write(json.dumps(_record_to_json(record)) + "\n")


def save_pseudo_labels(items: Iterable[tuple[str, Supervision]], path: str | Path) -> None:
    """Write (image id, voted supervision) pairs; empty votes keep their record."""
    path = Path(path)
    header = {"schema": PSEUDO_LABEL_SCHEMA, "version": SCHEMA_VERSION}
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for image_id, sup in items:
            boxes = [{"class": c, "box": list(b.as_tuple())} for c, b in sup.all_boxes()]
            fh.write(json.dumps({"id": image_id, "boxes": boxes}) + "\n")


def load_pseudo_labels(path: str | Path) -> list[tuple[str, Supervision]]:
    path = Path(path)
    _, lines = _read_header(path, PSEUDO_LABEL_SCHEMA)
    out: list[tuple[str, Supervision]] = []
    for lineno, obj in _parse_lines(path, lines):
        where = f"{path}:{lineno}"
        if "id" not in obj or "boxes" not in obj:
            raise DatasetFormatError(f"{where}: record must have 'id' and 'boxes'")
        by_class: dict[int, list[Box]] = {}
        for k, entry in enumerate(obj["boxes"]):
            if not isinstance(entry, dict) or "class" not in entry or "box" not in entry:
                raise DatasetFormatError(f"{where}: field 'boxes'[{k}] must have 'class' and 'box'")
            box = _box_from_json(entry["box"], f"{where}: field 'boxes'[{k}].box")
            by_class.setdefault(int(entry["class"]), []).append(box)
        out.append((str(obj["id"]), Supervision(boxes_by_class=by_class)))
    return out


def save_detections(dets: Sequence[Detection], path: str | Path) -> None:
    path = Path(path)
    header = {"schema": DETECTIONS_SCHEMA, "version": SCHEMA_VERSION}
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for d in dets:
            fh.write(
                json.dumps(
                    {
                        "id": d.image_id,
                        "class": d.class_id,
                        "box": list(d.box.as_tuple()),
                        "score": d.score,
                    }
                )
                + "\n"
            )


def load_detections(path: str | Path) -> list[Detection]:
    path = Path(path)
    _, lines = _read_header(path, DETECTIONS_SCHEMA)
    out: list[Detection] = []
    for lineno, obj in _parse_lines(path, lines):
        where = f"{path}:{lineno}"
        for key in ("id", "class", "box", "score"):
            if key not in obj:
                raise DatasetFormatError(f"{where}: missing field {key!r}")
        if not isinstance(obj["class"], int):
            raise DatasetFormatError(f"{where}: field 'class' must be an integer")
        box = _box_from_json(obj["box"], f"{where}: field 'box'")
        try:
            out.append(
                Detection(
                    image_id=str(obj["id"]),
                    class_id=obj["class"],
                    box=box,
                    score=float(obj["score"]),
                )
            )
        except (InputError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"{where}: {exc}") from None
    return out
