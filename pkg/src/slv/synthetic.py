"""Seeded synthetic scenes for desk-scale verification.

Each object carries a hidden "discriminative part", a sub-rectangle
covering 20-35% of its area. With probability `part_bias` the score model
puts the single highest proposal score on a part proposal while the full
extent still holds more aggregate score mass, reproducing the failure mode
where picking the top proposal localizes only the part. Proposal features
encode noisy geometry plus a per-class overlap signal so a linear scorer
can learn from them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .datasets import Dataset, DatasetRecord
from .geometry import Box, iou

# Score model constants: full-extent proposals hold more total mass than
# part proposals (so voting recovers the extent) while a dominant part's
# single score tops every full score (so argmax picks the part).
_FULL_SCORE = 0.06
_PART_SCORE_DOMINANT = 0.10
_PART_SCORE_WEAK = 0.004  # below the cluster center floor
_SCORE_WOBBLE = 0.2
_NOISE_SCORE_MAX = 0.0008  # below the default candidate threshold
_CONTEXT_SCORE_RANGE = (0.0005, 0.003)
_PART_FRACTION = (0.20, 0.35)
_CONTEXT_SHARE = 0.15
_PART_SHARE = 0.25  # of each object's proposal budget


@dataclass(frozen=True)
class SyntheticSceneConfig:
    num_images: int = 50
    image_size: int = 96
    num_classes: int = 3
    objects_per_image: int = 2
    proposals_per_image: int = 40
    jitter: float = 0.05
    part_bias: float = 0.9
    feature_noise: float = 0.05

    def __post_init__(self) -> None:
        if self.num_images <= 0 or self.image_size < 16:
            raise ConfigError("synthetic config: need num_images > 0 and image_size >= 16")
        if self.num_classes <= 0 or self.objects_per_image <= 0:
            raise ConfigError("synthetic config: need positive num_classes and objects_per_image")
        if self.proposals_per_image < self.objects_per_image * 4:
            raise ConfigError("synthetic config: need at least 4 proposals per object")
        if not 0.0 <= self.part_bias <= 1.0:
            raise ConfigError(f"synthetic config: part_bias must be in [0, 1], got {self.part_bias}")
        if self.jitter < 0.0 or self.feature_noise < 0.0:
            raise ConfigError("synthetic config: jitter and feature_noise must be >= 0")

    @property
    def feature_dim(self) -> int:
        return 5 + self.num_classes


def _sample_object_boxes(rng: np.random.Generator, config: SyntheticSceneConfig) -> list[Box]:
    """Ground-truth boxes, pairwise separated so voted regions stay apart."""
    size = config.image_size
    margin = max(3, int(round(4 * config.jitter * size)))
    boxes: list[Box] = []
    for _ in range(config.objects_per_image):
        for _attempt in range(60):
            w = int(rng.integers(int(0.22 * size), int(0.42 * size) + 1))
            h = int(rng.integers(int(0.22 * size), int(0.42 * size) + 1))
            x0 = int(rng.integers(0, size - w + 1))
            y0 = int(rng.integers(0, size - h + 1))
            candidate = Box(x0, y0, x0 + w, y0 + h)
            grown = (x0 - margin, y0 - margin, x0 + w + margin, y0 + h + margin)
            clash = any(
                not (grown[2] <= b.x0 or b.x1 <= grown[0] or grown[3] <= b.y0 or b.y1 <= grown[1])
                for b in boxes
            )
            if not clash:
                boxes.append(candidate)
                break
        # A crowded image simply gets fewer objects; never an error.
    return boxes


def _part_box(rng: np.random.Generator, obj: Box) -> Box:
    frac = rng.uniform(*_PART_FRACTION)
    aspect = rng.uniform(0.85, 1.18)
    w = max(1, min(obj.width - 1, int(round(obj.width * math.sqrt(frac * aspect)))))
    h = max(1, min(obj.height - 1, int(round(obj.height * math.sqrt(frac / aspect)))))
    x0 = obj.x0 + int(rng.integers(0, obj.width - w + 1))
    y0 = obj.y0 + int(rng.integers(0, obj.height - h + 1))
    return Box(x0, y0, x0 + w, y0 + h)


def _jitter_box(rng: np.random.Generator, box: Box, jitter: float, size: int) -> Box:
    if jitter == 0.0:
        return box
    dx = rng.uniform(-jitter, jitter, size=2) * box.width
    dy = rng.uniform(-jitter, jitter, size=2) * box.height
    x0 = int(round(box.x0 + dx[0]))
    x1 = int(round(box.x1 + dx[1]))
    y0 = int(round(box.y0 + dy[0]))
    y1 = int(round(box.y1 + dy[1]))
    x0 = min(max(x0, 0), size - 1)
    y0 = min(max(y0, 0), size - 1)
    x1 = min(max(x1, x0 + 1), size)
    y1 = min(max(y1, y0 + 1), size)
    return Box(x0, y0, x1, y1)


def _random_box(rng: np.random.Generator, size: int) -> Box:
    w = int(rng.integers(max(2, size // 12), max(3, size // 3)))
    h = int(rng.integers(max(2, size // 12), max(3, size // 3)))
    x0 = int(rng.integers(0, size - w + 1))
    y0 = int(rng.integers(0, size - h + 1))
    return Box(x0, y0, x0 + w, y0 + h)


def _wobble(rng: np.random.Generator, base: float) -> float:
    return base * (1.0 + rng.uniform(-_SCORE_WOBBLE, _SCORE_WOBBLE))


def generate_synthetic(config: SyntheticSceneConfig, seed: int) -> Dataset:
    """Deterministic synthetic dataset with ground truth, features, and
    the built-in biased score model baked into each record."""
    rng = np.random.default_rng(seed)
    size = config.image_size
    records: list[DatasetRecord] = []
    for idx in range(config.num_images):
        objects = _sample_object_boxes(rng, config)
        classes = [int(rng.integers(config.num_classes)) for _ in objects]
        parts = [_part_box(rng, obj) for obj in objects]
        dominant = [bool(rng.random() < config.part_bias) for _ in objects]

        n_context = max(1, int(round(_CONTEXT_SHARE * config.proposals_per_image)))
        budget = config.proposals_per_image - n_context
        shares = [budget // len(objects)] * len(objects)
        shares[0] += budget - sum(shares)

        proposals: list[Box] = []
        owners: list[int] = []  # object index, -1 for context proposals
        is_part: list[bool] = []
        for obj_idx, (obj, part, n_obj) in enumerate(zip(objects, parts, shares)):
            n_part = max(1, int(round(_PART_SHARE * n_obj)))
            n_full = n_obj - n_part
            for _ in range(n_full):
                proposals.append(_jitter_box(rng, obj, config.jitter, size))
                owners.append(obj_idx)
                is_part.append(False)
            for _ in range(n_part):
                proposals.append(_jitter_box(rng, part, config.jitter, size))
                owners.append(obj_idx)
                is_part.append(True)
        for _ in range(n_context):
            proposals.append(_random_box(rng, size))
            owners.append(-1)
            is_part.append(False)

        labels = np.zeros(config.num_classes, dtype=np.int64)
        for c in classes:
            labels[c] = 1
        positive = np.flatnonzero(labels).tolist()

        num = len(proposals)
        scores = rng.uniform(0.0, _NOISE_SCORE_MAX, size=(config.num_classes, num))
        for r in range(num):
            owner = owners[r]
            if owner >= 0:
                c = classes[owner]
                if is_part[r]:
                    base = _PART_SCORE_DOMINANT if dominant[owner] else _PART_SCORE_WEAK
                else:
                    base = _FULL_SCORE
                scores[c, r] = _wobble(rng, base)
            else:
                for c in positive:
                    scores[c, r] = rng.uniform(*_CONTEXT_SCORE_RANGE)

        features = np.zeros((num, config.feature_dim))
        for r, box in enumerate(proposals):
            cx, cy = box.center
            features[r, 0] = 1.0
            features[r, 1] = cx / size
            features[r, 2] = cy / size
            features[r, 3] = math.log(box.width / size)
            features[r, 4] = math.log(box.height / size)
        for c in range(config.num_classes):
            gt_c = [objects[k] for k in range(len(objects)) if classes[k] == c]
            for r, box in enumerate(proposals):
                overlap = max((iou(box, g) for g in gt_c), default=0.0)
                noisy = overlap + rng.normal(0.0, config.feature_noise)
                features[r, 5 + c] = min(max(noisy, 0.0), 1.0)

        gt_boxes: dict[int, list[Box]] = {}
        for obj, c in zip(objects, classes):
            gt_boxes.setdefault(c, []).append(obj)

        records.append(
            DatasetRecord(
                image_id=f"synth-{idx:04d}",
                height=size,
                width=size,
                labels=labels,
                proposals=proposals,
                features=features,
                scores=scores,
                gt_boxes=gt_boxes,
            )
        )
    return Dataset(
        records=records,
        num_classes=config.num_classes,
        feature_dim=config.feature_dim,
    )
