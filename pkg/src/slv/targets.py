"""Per-proposal training targets from voted pseudo ground truth, the
multi-task re-classification/re-localization loss, and the ramped weight
that phases that loss in over training."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .geometry import Box, iou
from .mil import PROB_EPS, ScoreMatrix
from .voting import Supervision

IGNORED = -1  # label marker for proposals excluded from both loss terms

SMOOTH_L1_BETA = 1.0


@dataclass(frozen=True)
class ProposalTargets:
    """Assignment of proposals to voted boxes.

    labels[r] is a class id in [0, num_classes) for foreground, num_classes
    for background, IGNORED otherwise. offsets[r] holds the encoded
    regression target of foreground proposals and zeros elsewhere.
    weights[r] is 1 for foreground/background and 0 for ignored.
    """

    labels: np.ndarray
    offsets: np.ndarray
    weights: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels, dtype=np.int64)
        offsets = np.asarray(self.offsets, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if offsets.shape != (labels.shape[0], 4) or weights.shape != labels.shape:
            raise InputError("ProposalTargets: inconsistent array shapes")
        if not np.isfinite(offsets).all():
            raise InputError("ProposalTargets: regression targets must be finite")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "weights", weights)

    @property
    def foreground_mask(self) -> np.ndarray:
        return (self.labels >= 0) & (self.labels < self.num_classes)

    @property
    def valid_mask(self) -> np.ndarray:
        return self.labels != IGNORED

    @property
    def num_foreground(self) -> int:
        return int(self.foreground_mask.sum())


def encode_offsets(proposal: Box, target: Box) -> np.ndarray:
    """Center/size offsets (dx, dy, dw, dh) mapping proposal onto target.

    dx, dy are center shifts normalized by the proposal size; dw, dh are
    log size ratios. Class-agnostic: four values per proposal.
    """
    pcx, pcy = proposal.center
    gcx, gcy = target.center
    return np.array(
        [
            (gcx - pcx) / proposal.width,
            (gcy - pcy) / proposal.height,
            math.log(target.width / proposal.width),
            math.log(target.height / proposal.height),
        ]
    )


def decode_offsets_float(proposal: Box, t: Sequence[float]) -> tuple[float, float, float, float]:
    """Inverse of encode_offsets, before clipping and pixel rounding."""
    dx, dy, dw, dh = (float(v) for v in t)
    if not all(math.isfinite(v) for v in (dx, dy, dw, dh)):
        raise InputError("decode_offsets: offsets must be finite")
    pcx, pcy = proposal.center
    cx = pcx + dx * proposal.width
    cy = pcy + dy * proposal.height
    w = proposal.width * math.exp(dw)
    h = proposal.height * math.exp(dh)
    return cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0


def decode_offsets(proposal: Box, t: Sequence[float], height: int, width: int) -> Box | None:
    """Apply offsets to a proposal, clip to the image, round to pixels.

    Returns None when the decoded box is empty after clipping (an invalid
    detection the caller should drop).
    """
    x0, y0, x1, y1 = decode_offsets_float(proposal, t)
    x0 = min(max(x0, 0.0), float(width))
    y0 = min(max(y0, 0.0), float(height))
    x1 = min(max(x1, 0.0), float(width))
    y1 = min(max(y1, 0.0), float(height))
    ix0 = int(math.floor(x0 + 0.5))
    iy0 = int(math.floor(y0 + 0.5))
    ix1 = int(math.floor(x1 + 0.5))
    iy1 = int(math.floor(y1 + 0.5))
    if ix0 >= ix1 or iy0 >= iy1:
        return None
    return Box(ix0, iy0, ix1, iy1)


def assign_targets(
    boxes: Sequence[Box],
    sup: Supervision,
    num_classes: int,
    fg_iou: float = 0.5,
    bg_iou_range: tuple[float, float] = (0.1, 0.5),
) -> ProposalTargets:
    """Match each proposal to its best-overlapping voted box.

    IoU >= fg_iou makes a proposal foreground for that box's class, with
    encoded regression offsets; IoU in [lo, hi) makes it background;
    anything else is ignored. An empty Supervision ignores everything.
    """
    lo, hi = bg_iou_range
    if not 0.0 <= lo < hi:
        raise ConfigError(f"assign_targets: bad background IoU range [{lo}, {hi})")
    if fg_iou < hi:
        raise ConfigError(
            f"assign_targets: foreground threshold {fg_iou} overlaps background band ending at {hi}"
        )
    num = len(boxes)
    labels = np.full(num, IGNORED, dtype=np.int64)
    offsets = np.zeros((num, 4), dtype=np.float64)
    weights = np.zeros(num, dtype=np.float64)
    voted = sup.all_boxes()
    if voted:
        for r, proposal in enumerate(boxes):
            ious = [iou(proposal, g) for _, g in voted]
            best = max(range(len(voted)), key=lambda m: (ious[m], -m))
            best_iou = ious[best]
            if best_iou >= fg_iou:
                cls, g = voted[best]
                labels[r] = cls
                offsets[r] = encode_offsets(proposal, g)
                weights[r] = 1.0
            elif lo <= best_iou < hi:
                labels[r] = num_classes
                weights[r] = 1.0
    return ProposalTargets(labels=labels, offsets=offsets, weights=weights, num_classes=num_classes)


def smooth_l1(x: np.ndarray, beta: float = SMOOTH_L1_BETA) -> np.ndarray:
    """Elementwise smooth L1: quadratic inside |x| < beta, linear outside."""
    ax = np.abs(x)
    quad = np.minimum(ax, beta)  # branch-free; also avoids squaring huge values
    return 0.5 * quad * quad / beta + (ax - quad)


def smooth_l1_grad(x: np.ndarray, beta: float = SMOOTH_L1_BETA) -> np.ndarray:
    return np.clip(x, -beta, beta) / beta


def slv_loss(
    phi_s: ScoreMatrix,
    t_s: np.ndarray,
    targets: ProposalTargets,
) -> tuple[float, np.ndarray, np.ndarray, bool]:
    """Multi-task loss over labeled proposals.

    Classification: mean cross-entropy of phi_s (class rows plus trailing
    background row) over non-ignored proposals. Localization: mean smooth
    L1 over the four offset coordinates of foreground proposals. Returns
    (loss, grad wrt phi_s, grad wrt t_s, vacuous); a vacuous result (no
    labeled proposal at all) is zero loss with zero gradients.
    """
    t_s = np.asarray(t_s, dtype=np.float64)
    num = targets.labels.shape[0]
    if phi_s.cols != num:
        raise InputError(f"slv_loss: {phi_s.cols} score columns but {num} proposals")
    if phi_s.rows != targets.num_classes + 1:
        raise InputError(
            f"slv_loss: expected {targets.num_classes + 1} score rows, got {phi_s.rows}"
        )
    if t_s.shape != (num, 4):
        raise InputError(f"slv_loss: offsets must have shape ({num}, 4), got {t_s.shape}")
    grad_scores = np.zeros_like(phi_s.data)
    grad_offsets = np.zeros_like(t_s)
    valid = np.flatnonzero(targets.valid_mask)
    if valid.size == 0:
        return 0.0, grad_scores, grad_offsets, True
    probs = phi_s.data
    cls_loss = 0.0
    for r in valid.tolist():
        label = int(targets.labels[r])
        p = probs[label, r]
        clamped = float(np.clip(p, PROB_EPS, 1.0 - PROB_EPS))
        cls_loss -= math.log(clamped)
        if PROB_EPS < p < 1.0 - PROB_EPS:
            grad_scores[label, r] = -1.0 / (valid.size * p)
    cls_loss /= valid.size
    fg = np.flatnonzero(targets.foreground_mask)
    loc_loss = 0.0
    if fg.size:
        diff = t_s[fg] - targets.offsets[fg]
        # huge prediction errors overflow the sum to inf; callers treat a
        # non-finite loss as divergence, so no warning is needed here
        with np.errstate(over="ignore"):
            loc_loss = float(smooth_l1(diff).sum() / (4.0 * fg.size))
        grad_offsets[fg] = smooth_l1_grad(diff) / (4.0 * fg.size)
    return cls_loss + loc_loss, grad_scores, grad_offsets, False


@dataclass(frozen=True)
class LossWeightSchedule:
    """Linear ramp for the multi-task loss weight: 0 at iteration 0, 1 from
    `ramp_length` onward. An infinite ramp keeps the weight at 0."""

    ramp_length: float
    shape: str = "linear"

    def __post_init__(self) -> None:
        if self.shape != "linear":
            raise ConfigError(f"unsupported ramp shape {self.shape!r}")
        if not self.ramp_length > 0:
            raise ConfigError(f"ramp_length must be positive, got {self.ramp_length}")


def loss_weight(schedule: LossWeightSchedule, i: int) -> float:
    """Ramp value at iteration i."""
    if i < 0:
        raise InputError(f"loss_weight: iteration index must be >= 0, got {i}")
    if math.isinf(schedule.ramp_length):
        return 0.0
    return min(i / schedule.ramp_length, 1.0)


def total_loss(l_mil: float, l_refine: Sequence[float], l_slv: float, w_slv: float) -> float:
    """Weighted sum of the image loss, refinement losses, and voted-supervision loss."""
    values = [l_mil, *l_refine, l_slv, w_slv]
    if not all(math.isfinite(float(v)) for v in values):
        raise InputError("total_loss: all terms must be finite")
    return float(l_mil) + float(sum(l_refine)) + float(w_slv) * float(l_slv)
