"""Spatial likelihood voting: candidate proposals accumulate their class
scores over the pixels they cover; the normalized, thresholded map votes
minimum bounding rectangles of its connected regions as pseudo ground truth.

Two accumulation kernels are provided: a fast 2-D difference-array version
(constant work per box plus two prefix-sum passes) and a naive definitional
version used as its oracle. Both share the half-open pixel convention from
`geometry`, so they agree exactly.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError
from .geometry import BinaryGrid, Box, boxes_to_array, connected_components, min_bounding_rect
from .mil import ScoreMatrix, positive_classes

# PASCAL VOC 2007/2012 category names, index order used for class ids.
VOC2007_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat",
    "chair", "cow", "diningtable", "dog", "horse", "motorbike", "person",
    "pottedplant", "sheep", "sofa", "train", "tvmonitor",
)


@dataclass(frozen=True)
class LikelihoodMap:
    """Per-pixel accumulation grid for one class.

    `normalized` marks maps scaled into [0, 1]; `empty` marks all-zero maps
    that had nothing to normalize.
    """

    data: np.ndarray
    class_id: int = 0
    normalized: bool = False
    empty: bool = False

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise InputError(f"LikelihoodMap must be 2-D, got shape {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class VoteConfig:
    """Thresholds of the voting step.

    t_score filters candidate proposals (strictly greater); t_b binarizes
    the normalized map (strictly greater), with optional per-class
    overrides keyed by class id.
    """

    t_score: float = 0.001
    t_b_default: float = 0.5
    t_b_per_class: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, value in [("t_score", self.t_score), ("t_b_default", self.t_b_default)]:
            if not 0.0 < value < 1.0:
                raise ConfigError(f"VoteConfig.{name} must be in (0, 1), got {value}")
        for cls, value in self.t_b_per_class.items():
            if not 0.0 < value < 1.0:
                raise ConfigError(f"VoteConfig.t_b_per_class[{cls}] must be in (0, 1), got {value}")
        object.__setattr__(self, "t_b_per_class", dict(self.t_b_per_class))

    def t_b_for(self, class_id: int) -> float:
        return self.t_b_per_class.get(class_id, self.t_b_default)


def voc2007_config() -> VoteConfig:
    """Shipped preset: t_score 0.001, t_b 0.5 with the person class at 0.2."""
    return VoteConfig(
        t_score=0.001,
        t_b_default=0.5,
        t_b_per_class={VOC2007_CLASSES.index("person"): 0.2},
    )


@dataclass(frozen=True)
class Supervision:
    """Voted pseudo ground truth: class id -> voted boxes, positive classes only."""

    boxes_by_class: dict[int, list[Box]] = field(default_factory=dict)

    @property
    def is_empty(self) -> bool:
        return not any(self.boxes_by_class.values())

    def classes(self) -> list[int]:
        return sorted(self.boxes_by_class)

    def all_boxes(self) -> list[tuple[int, Box]]:
        """(class_id, box) pairs, ordered by class then vote order."""
        return [(c, b) for c in self.classes() for b in self.boxes_by_class[c]]


def select_candidates(
    phi_bar: ScoreMatrix, boxes: Sequence[Box], c: int, t_score: float
) -> np.ndarray:
    """Indices of proposals whose class-c score strictly exceeds t_score."""
    if phi_bar.cols != len(boxes):
        raise InputError(f"select_candidates: {phi_bar.cols} score columns but {len(boxes)} boxes")
    if not 0 <= c < phi_bar.rows:
        raise InputError(f"select_candidates: class {c} out of range for {phi_bar.rows} rows")
    return np.flatnonzero(phi_bar.data[c] > t_score)


def _check_accumulate_inputs(
    candidates: Iterable[int], boxes: Sequence[Box], scores: np.ndarray, height: int, width: int
) -> tuple[np.ndarray, np.ndarray]:
    if height <= 0 or width <= 0:
        raise InputError(f"accumulate: image size must be positive, got {height}x{width}")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(boxes),):
        raise InputError(f"accumulate: {len(boxes)} boxes but scores shape {scores.shape}")
    idx = np.asarray(list(candidates), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= len(boxes)):
        raise InputError("accumulate: candidate index out of range")
    if idx.size and (not np.isfinite(scores[idx]).all() or scores[idx].min() < 0.0):
        raise InputError("accumulate: candidate scores must be finite and non-negative")
    for i in idx.tolist():
        b = boxes[i]
        if b.x1 > width or b.y1 > height:
            raise InputError(
                f"accumulate: box {b.as_tuple()} exceeds the {height}x{width} image; clip first"
            )
    return idx, scores


def accumulate_fast(
    candidates: Iterable[int],
    boxes: Sequence[Box],
    scores: np.ndarray,
    height: int,
    width: int,
    class_id: int = 0,
) -> LikelihoodMap:
    """Sum each candidate's score over the pixels its box covers.

    Difference-array kernel: each box deposits +s/-s at its four corners on
    an (H+1)x(W+1) grid; two prefix-sum passes spread the deposits, giving
    O(H*W + len(candidates)) total work.
    """
    idx, scores = _check_accumulate_inputs(candidates, boxes, scores, height, width)
    diff = np.zeros((height + 1, width + 1), dtype=np.float64)
    if idx.size:
        arr = boxes_to_array([boxes[i] for i in idx.tolist()])
        s = scores[idx]
        x0, y0, x1, y1 = arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]
        np.add.at(diff, (y0, x0), s)
        np.add.at(diff, (y0, x1), -s)
        np.add.at(diff, (y1, x0), -s)
        np.add.at(diff, (y1, x1), s)
    acc = diff.cumsum(axis=0).cumsum(axis=1)[:height, :width]
    # Cancellation can leave sub-ulp negatives where the exact value is 0.
    np.maximum(acc, 0.0, out=acc)
    return LikelihoodMap(acc, class_id=class_id)


def accumulate_naive(
    candidates: Iterable[int],
    boxes: Sequence[Box],
    scores: np.ndarray,
    height: int,
    width: int,
    class_id: int = 0,
) -> LikelihoodMap:
    """Definitional oracle for accumulate_fast: one rectangle add per box."""
    idx, scores = _check_accumulate_inputs(candidates, boxes, scores, height, width)
    acc = np.zeros((height, width), dtype=np.float64)
    for i in idx.tolist():
        b = boxes[i]
        acc[b.y0 : b.y1, b.x0 : b.x1] += scores[i]
    return LikelihoodMap(acc, class_id=class_id)


def normalize(likelihood: LikelihoodMap) -> LikelihoodMap:
    """Scale a map into [0, 1] by its maximum entry.

    An all-zero map cannot be scaled; it is returned unchanged with the
    `empty` flag set so callers can skip voting for that class.
    """
    data = likelihood.data
    if data.size and data.min() < 0.0:
        raise InputError("normalize: map entries must be non-negative")
    peak = data.max() if data.size else 0.0
    if peak <= 0.0:
        return LikelihoodMap(data.copy(), likelihood.class_id, normalized=True, empty=True)
    return LikelihoodMap(data / peak, likelihood.class_id, normalized=True, empty=False)


def binarize(likelihood: LikelihoodMap, t_b: float) -> BinaryGrid:
    """Cells strictly above t_b in a normalized map."""
    if not likelihood.normalized:
        raise InputError("binarize: map must be normalized first")
    if not 0.0 < t_b < 1.0:
        raise InputError(f"binarize: t_b must be in (0, 1), got {t_b}")
    return likelihood.data > t_b


def vote_boxes(grid: BinaryGrid) -> list[Box]:
    """Minimum bounding rectangles of the grid's connected regions."""
    return [min_bounding_rect(comp) for comp in connected_components(grid)]


def generate_supervision(
    phi_bar: ScoreMatrix,
    boxes: Sequence[Box],
    y: np.ndarray,
    height: int,
    width: int,
    config: VoteConfig,
) -> Supervision:
    """Vote pseudo ground-truth boxes for every positive class of an image.

    Per class: filter candidates by t_score, accumulate their scores
    spatially, normalize, binarize at the class threshold, and take the
    bounding rectangles of the surviving regions. Classes with no candidate
    or an empty map contribute no boxes; that is a valid, empty vote.
    """
    pos = positive_classes(y)
    if not pos:
        raise InputError("generate_supervision: image has no positive class")
    if phi_bar.cols != len(boxes):
        raise InputError(
            f"generate_supervision: {phi_bar.cols} score columns but {len(boxes)} boxes"
        )
    if phi_bar.rows < len(y):
        raise InputError("generate_supervision: score matrix has no row for some class")
    scores = phi_bar.data
    voted: dict[int, list[Box]] = {}
    for c in pos:
        candidates = select_candidates(phi_bar, boxes, c, config.t_score)
        if candidates.size == 0:
            continue
        likelihood = accumulate_fast(candidates, boxes, scores[c], height, width, class_id=c)
        normalized = normalize(likelihood)
        if normalized.empty:
            continue
        rects = vote_boxes(binarize(normalized, config.t_b_for(c)))
        if rects:
            voted[c] = rects
    return Supervision(boxes_by_class=voted)


def write_pgm(likelihood: LikelihoodMap, path: str | Path) -> None:
    """Export a normalized map as binary PGM (P5, maxval 255, row-major).

    Pixel byte = round(255 * value). Quantization happens only here; the
    in-memory map stays double precision.
    """
    data = likelihood.data
    if not likelihood.normalized:
        raise InputError("write_pgm: map must be normalized first")
    quantized = np.rint(255.0 * data).astype(np.uint8)
    header = f"P5\n{likelihood.width} {likelihood.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + quantized.tobytes(order="C"))
