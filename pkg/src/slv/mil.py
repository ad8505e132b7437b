"""Two-stream proposal scoring, the image-level loss, and cluster refinement.

Score matrices are classes x proposals. Matrices with a background row
keep it as the LAST row. All log arguments are clamped to
[PROB_EPS, 1 - PROB_EPS] so losses stay finite on saturated inputs;
gradients are zero inside the clamped region.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InputError, NumericalError
from .geometry import Box, pairwise_iou

# Normalization tags for ScoreMatrix.
RAW = "raw"
OVER_CLASSES = "over_classes"      # every column sums to 1
OVER_PROPOSALS = "over_proposals"  # every row sums to 1
PRODUCT = "product"                # entrywise product of the two above

PROB_EPS = 1e-8
_SUM_TOL = 1e-9

# Proposals scoring below this floor for a class never seed a new cluster;
# keeps noise from spawning one singleton cluster per proposal.
CLUSTER_CENTER_FLOOR = 0.01


@dataclass(frozen=True)
class ScoreMatrix:
    """A (rows x cols) score grid tagged with its normalization state.

    rows is the number of classes (plus one trailing background row for
    refinement-style matrices); cols is the number of proposals. The
    underlying array is treated as immutable.
    """

    data: np.ndarray
    kind: str = RAW

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise InputError(f"ScoreMatrix must be 2-D, got shape {arr.shape}")
        if self.kind not in (RAW, OVER_CLASSES, OVER_PROPOSALS, PRODUCT):
            raise InputError(f"unknown ScoreMatrix kind {self.kind!r}")
        if not np.isfinite(arr).all():
            raise InputError("ScoreMatrix entries must be finite")
        if self.kind != RAW:
            if arr.min(initial=0.0) < -_SUM_TOL or arr.max(initial=0.0) > 1.0 + _SUM_TOL:
                raise InputError(f"{self.kind} ScoreMatrix entries must lie in [0, 1]")
            if self.kind == OVER_CLASSES and arr.size:
                sums = arr.sum(axis=0)
                if np.abs(sums - 1.0).max() > _SUM_TOL:
                    raise InputError("over_classes ScoreMatrix columns must sum to 1")
            if self.kind == OVER_PROPOSALS and arr.size:
                sums = arr.sum(axis=1)
                if np.abs(sums - 1.0).max() > _SUM_TOL:
                    raise InputError("over_proposals ScoreMatrix rows must sum to 1")
        object.__setattr__(self, "data", arr)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


def positive_classes(y: np.ndarray) -> list[int]:
    """Indices of positive labels in a binary image-label vector."""
    y = np.asarray(y)
    if y.ndim != 1 or not np.isin(y, (0, 1)).all():
        raise InputError("image label must be a 1-D vector of 0/1 entries")
    return np.flatnonzero(y == 1).tolist()


def _softmax(arr: np.ndarray, axis: int) -> np.ndarray:
    # Max-subtraction may legitimately hit -inf for saturated logits;
    # exp(-inf) = 0 is the correct limit, so silence the overflow warning.
    with np.errstate(over="ignore"):
        shifted = arr - arr.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_over_classes(x: ScoreMatrix) -> ScoreMatrix:
    """Softmax each column over classes; columns of the result sum to 1."""
    return ScoreMatrix(_softmax(x.data, axis=0), kind=OVER_CLASSES)


def softmax_over_proposals(x: ScoreMatrix) -> ScoreMatrix:
    """Softmax each row over proposals; rows of the result sum to 1."""
    return ScoreMatrix(_softmax(x.data, axis=1), kind=OVER_PROPOSALS)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray, axis: int) -> np.ndarray:
    """Gradient of a softmax output back to its logits along `axis`."""
    inner = (grad_probs * probs).sum(axis=axis, keepdims=True)
    return probs * (grad_probs - inner)


def wsddn_scores(sigma_cls: ScoreMatrix, sigma_det: ScoreMatrix) -> ScoreMatrix:
    """Entrywise product of the classification and detection streams."""
    if sigma_cls.kind != OVER_CLASSES:
        raise InputError(f"wsddn_scores: first factor must be {OVER_CLASSES}, got {sigma_cls.kind}")
    if sigma_det.kind != OVER_PROPOSALS:
        raise InputError(f"wsddn_scores: second factor must be {OVER_PROPOSALS}, got {sigma_det.kind}")
    if sigma_cls.data.shape != sigma_det.data.shape:
        raise InputError(
            f"wsddn_scores: shape mismatch {sigma_cls.data.shape} vs {sigma_det.data.shape}"
        )
    return ScoreMatrix(sigma_cls.data * sigma_det.data, kind=PRODUCT)


def image_scores(phi0: ScoreMatrix) -> np.ndarray:
    """Per-class image scores: sum the product matrix over proposals."""
    if phi0.kind != PRODUCT:
        raise InputError(f"image_scores: expected a {PRODUCT} matrix, got {phi0.kind}")
    return phi0.data.sum(axis=1)


def mil_loss(phi: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Binary cross-entropy of image scores against the image label.

    Returns (loss, gradient wrt phi). Entries of phi must lie in [0, 1]
    before clamping.
    """
    phi = np.asarray(phi, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if phi.shape != y.shape or phi.ndim != 1:
        raise InputError(f"mil_loss: shape mismatch phi {phi.shape} vs y {y.shape}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise InputError("mil_loss: labels must be 0/1 indicators")
    if not np.isfinite(phi).all() or phi.min(initial=0.0) < 0.0 or phi.max(initial=0.0) > 1.0 + 1e-9:
        raise InputError("mil_loss: image scores must lie in [0, 1]")
    clamped = np.clip(phi, PROB_EPS, 1.0 - PROB_EPS)
    loss = -float(np.sum(y * np.log(clamped) + (1.0 - y) * np.log(1.0 - clamped)))
    grad = (clamped - y) / (clamped * (1.0 - clamped))
    grad = np.where((phi > PROB_EPS) & (phi < 1.0 - PROB_EPS), grad, 0.0)
    return loss, grad


@dataclass(frozen=True)
class Cluster:
    """One foreground proposal cluster: spatially adjacent, same class."""

    label: int
    members: tuple[int, ...]
    score: float  # confidence, the center proposal's class score

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class ClusterSet:
    """A partition of all proposals into foreground clusters plus background."""

    clusters: tuple[Cluster, ...]
    background: tuple[int, ...]
    background_weights: np.ndarray  # aligned with `background`, in [0, 1]
    num_proposals: int

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "background_weights", np.asarray(self.background_weights, dtype=np.float64)
        )
        covered: list[int] = [r for c in self.clusters for r in c.members]
        covered.extend(self.background)
        assert sorted(covered) == list(range(self.num_proposals)), "clusters must partition proposals"
        assert len(self.background) == len(self.background_weights)


def build_clusters(
    scores: ScoreMatrix,
    boxes: Sequence[Box],
    y: np.ndarray,
    iou_threshold: float = 0.5,
    center_floor: float = CLUSTER_CENTER_FLOOR,
) -> ClusterSet:
    """Greedy proposal clustering around high-scoring centers.

    Simplified scheme (the full graph-based cluster generation is out of
    scope): per positive class, the highest-scoring unassigned proposal
    seeds a cluster and absorbs every unassigned proposal whose IoU with
    it reaches `iou_threshold`; seeding stops below `center_floor`.
    Leftover proposals form the background cluster, each weighted by one
    minus its best positive-class score.
    """
    pos = positive_classes(y)
    if not pos:
        raise InputError("build_clusters: image has no positive class")
    num = len(boxes)
    if scores.cols != num:
        raise InputError(f"build_clusters: {scores.cols} score columns but {num} boxes")
    if scores.rows < max(pos) + 1:
        raise InputError("build_clusters: score matrix has no row for some positive class")
    data = scores.data
    overlaps = pairwise_iou(boxes)
    unassigned = set(range(num))
    clusters: list[Cluster] = []
    for c in pos:
        while unassigned:
            center = min(unassigned, key=lambda r: (-data[c, r], r))
            if data[c, center] < center_floor:
                break
            members = sorted(r for r in unassigned if overlaps[center, r] >= iou_threshold)
            unassigned.difference_update(members)
            clusters.append(Cluster(label=c, members=tuple(members), score=float(data[c, center])))
    background = tuple(sorted(unassigned))
    fg_scores = data[pos, :].max(axis=0) if background else np.zeros(0)
    weights = np.clip(1.0 - fg_scores[list(background)], 0.0, 1.0) if background else np.zeros(0)
    return ClusterSet(
        clusters=tuple(clusters),
        background=background,
        background_weights=weights,
        num_proposals=num,
    )


def refinement_loss(phi_k: ScoreMatrix, clusters: ClusterSet) -> tuple[float, np.ndarray]:
    """Weighted cross-entropy over proposal clusters.

    phi_k must carry a trailing background row. Foreground clusters
    contribute their confidence-and-size-weighted log mean member score;
    background proposals contribute their weighted log background score.
    Returns (loss, gradient wrt phi_k entries).
    """
    probs = phi_k.data
    num = clusters.num_proposals
    if phi_k.cols != num:
        raise InputError(f"refinement_loss: {phi_k.cols} score columns but {num} proposals")
    if phi_k.rows < 2:
        raise InputError("refinement_loss: matrix needs class rows plus a background row")
    bg_row = phi_k.rows - 1
    grad = np.zeros_like(probs)
    total = 0.0
    for n, cluster in enumerate(clusters.clusters):
        if cluster.label >= bg_row:
            raise InputError(f"refinement_loss: cluster {n} labeled {cluster.label} has no row")
        members = list(cluster.members)
        mean_score = probs[cluster.label, members].sum() / cluster.size
        arg = np.clip(mean_score, PROB_EPS, 1.0 - PROB_EPS)
        if not np.isfinite(arg) or arg <= 0.0:
            raise NumericalError(f"refinement_loss: bad log argument in cluster {n}")
        total += cluster.score * cluster.size * np.log(arg)
        if PROB_EPS < mean_score < 1.0 - PROB_EPS:
            grad[cluster.label, members] -= cluster.score / (num * mean_score)
    for r, weight in zip(clusters.background, clusters.background_weights):
        p = probs[bg_row, r]
        arg = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
        if not np.isfinite(arg) or arg <= 0.0:
            raise NumericalError(f"refinement_loss: bad log argument for background proposal {r}")
        total += weight * np.log(arg)
        if PROB_EPS < p < 1.0 - PROB_EPS:
            grad[bg_row, r] -= weight / (num * p)
    return -total / num, grad


def average_refined_scores(*matrices: ScoreMatrix) -> ScoreMatrix:
    """Entrywise mean of same-shape, same-kind score matrices."""
    if not matrices:
        raise InputError("average_refined_scores: no matrices given")
    shape = matrices[0].data.shape
    kind = matrices[0].kind
    for m in matrices[1:]:
        if m.data.shape != shape:
            raise InputError(f"average_refined_scores: shape mismatch {m.data.shape} vs {shape}")
        if m.kind != kind:
            raise InputError(f"average_refined_scores: kind mismatch {m.kind} vs {kind}")
    mean = sum(m.data for m in matrices) / len(matrices)
    return ScoreMatrix(mean, kind=kind)
