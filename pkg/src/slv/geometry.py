"""Axis-aligned box arithmetic and binary-grid region extraction.

Boxes use the half-open pixel convention: pixel (i, j) is inside a box
exactly when y0 <= i < y1 and x0 <= j < x1, so the area is
(x1 - x0) * (y1 - y0) with no off-by-one corrections. Grid cells are
(row, col) tuples with the same orientation.
"""

from __future__ import annotations

import operator
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import InputError

# A binary grid is a 2-D boolean array; cell (i, j) is row i, column j.
# Components use 8-connectivity: diagonal neighbors join, so a region
# produced by overlapping rectangles never splits at a one-pixel pinch.
BinaryGrid = np.ndarray

Cell = tuple[int, int]


@dataclass(frozen=True, order=True)
class Box:
    """Axis-aligned rectangle in non-negative integer pixel coordinates."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self) -> None:
        for name in ("x0", "y0", "x1", "y1"):
            value = getattr(self, name)
            try:
                object.__setattr__(self, name, operator.index(value))
            except TypeError:
                raise InputError(f"box coordinate {name}={value!r} is not an integer") from None
        if self.x0 < 0 or self.y0 < 0:
            raise InputError(f"box coordinates must be non-negative, got {self.as_tuple()}")
        if self.x0 >= self.x1 or self.y0 >= self.y1:
            raise InputError(f"box must have positive width and height, got {self.as_tuple()}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        """(cx, cy) in pixel units."""
        return (self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union


def nms(boxes: Sequence[Box], scores: Sequence[float], iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression.

    Returns the retained indices sorted by descending score; equal scores
    are broken by lower index. A box is suppressed when its IoU with an
    already retained box exceeds the threshold.
    """
    if len(boxes) != len(scores):
        raise InputError(f"nms: {len(boxes)} boxes but {len(scores)} scores")
    if not 0.0 < iou_threshold < 1.0:
        raise InputError(f"nms: iou_threshold must be in (0, 1), got {iou_threshold}")
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept: list[int] = []
    for i in order:
        if all(iou(boxes[i], boxes[j]) <= iou_threshold for j in kept):
            kept.append(i)
    return kept


def connected_components(grid: BinaryGrid) -> list[set[Cell]]:
    """Partition the true cells of a binary grid into 8-connected regions.

    Components are ordered by the row-major position of their first cell,
    which makes downstream box extraction deterministic. Implemented over
    horizontal runs with union-find, so cost scales with runs, not cells.
    """
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise InputError(f"connected_components: expected a 2-D grid, got shape {grid.shape}")
    grid = grid.astype(bool, copy=False)
    height = grid.shape[0]

    parent: list[int] = []

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a: int, b: int) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    all_runs: list[tuple[int, int, int]] = []  # (row, start, end) indexed by run id
    previous: list[tuple[int, int, int]] = []  # (start, end, run id) of the row above
    for i in range(height):
        row = grid[i].astype(np.int8)
        if not row.any():
            previous = []
            continue
        edges = np.diff(np.concatenate(([0], row, [0])))
        starts = np.flatnonzero(edges == 1).tolist()
        ends = np.flatnonzero(edges == -1).tolist()
        current: list[tuple[int, int, int]] = []
        for s, e in zip(starts, ends):
            run_id = len(parent)
            parent.append(run_id)
            all_runs.append((i, s, e))
            current.append((s, e, run_id))
            # 8-connectivity: a run touches a run above when the interval
            # dilated by one pixel on each side overlaps it
            for ps, pe, pid in previous:
                if s - 1 < pe and ps < e + 1:
                    union(run_id, pid)
        previous = current

    groups: dict[int, list[tuple[int, int, int]]] = {}
    first_seen: dict[int, int] = {}
    for run_id, run in enumerate(all_runs):
        root = find(run_id)
        groups.setdefault(root, []).append(run)
        first_seen.setdefault(root, run_id)
    return [
        {(i, j) for i, s, e in groups[root] for j in range(s, e)}
        for root in sorted(groups, key=lambda r: first_seen[r])
    ]


def min_bounding_rect(component: Iterable[Cell]) -> Box:
    """Smallest box containing every cell of a component."""
    cells = list(component)
    if not cells:
        raise InputError("min_bounding_rect: component is empty")
    rows = [c[0] for c in cells]
    cols = [c[1] for c in cells]
    return Box(x0=min(cols), y0=min(rows), x1=max(cols) + 1, y1=max(rows) + 1)


def clip_box(b: Box | tuple[int, int, int, int], height: int, width: int) -> Box:
    """Clamp a box (or raw signed coordinate 4-tuple) to an HxW image.

    Raises InputError when the clamped box is empty, i.e. the input lies
    entirely outside the image.
    """
    if height <= 0 or width <= 0:
        raise InputError(f"clip_box: image size must be positive, got {height}x{width}")
    x0, y0, x1, y1 = b.as_tuple() if isinstance(b, Box) else b
    cx0 = min(max(x0, 0), width)
    cy0 = min(max(y0, 0), height)
    cx1 = min(max(x1, 0), width)
    cy1 = min(max(y1, 0), height)
    if cx0 >= cx1 or cy0 >= cy1:
        raise InputError(f"clip_box: box {(x0, y0, x1, y1)} lies outside a {height}x{width} image")
    return Box(cx0, cy0, cx1, cy1)


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    """Stack boxes into an (N, 4) int64 array of (x0, y0, x1, y1) rows."""
    if not boxes:
        return np.zeros((0, 4), dtype=np.int64)
    return np.array([b.as_tuple() for b in boxes], dtype=np.int64)


def pairwise_iou(boxes: Sequence[Box]) -> np.ndarray:
    """(N, N) IoU matrix; matches iou() entrywise."""
    arr = boxes_to_array(boxes).astype(np.float64)
    if not len(arr):
        return np.zeros((0, 0))
    x0, y0, x1, y1 = arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]
    iw = np.minimum(x1[:, None], x1[None, :]) - np.maximum(x0[:, None], x0[None, :])
    ih = np.minimum(y1[:, None], y1[None, :]) - np.maximum(y0[:, None], y0[None, :])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area = (x1 - x0) * (y1 - y0)
    return inter / (area[:, None] + area[None, :] - inter)
