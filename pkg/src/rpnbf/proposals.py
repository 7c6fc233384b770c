"""From RPN score/delta maps to ranked proposals, plus the anchor labeler,
the minibatch sampler and the recall-vs-IoU evaluator."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from rpnbf.geometry import AnchorGrid, Box, boxes_to_array, clip_boxes, decode_deltas, iou_matrix, nms_indices
from rpnbf.tensors import FeatureMap

SCORE_EPS = 1e-6


class Label(enum.IntEnum):
    NEGATIVE = 0
    POSITIVE = 1
    IGNORED = -1


@dataclass(frozen=True)
class Proposal:
    box: Box
    score: float
    source_anchor: int


@dataclass(frozen=True)
class AnchorLabel:
    label: Label
    matched_gt: int | None
    max_iou: float


@dataclass(frozen=True)
class SampleBatch:
    indices: np.ndarray
    labels: np.ndarray  # 1 positive, 0 negative

    @property
    def size(self) -> int:
        return int(self.indices.shape[0])

    @property
    def num_positive(self) -> int:
        return int(np.count_nonzero(self.labels == 1))


@dataclass
class ProposalArrays:
    """Column form of a proposal list for one image."""

    boxes: np.ndarray  # (N, 4) xywh
    scores: np.ndarray  # (N,)
    anchors: np.ndarray  # (N,) source anchor index

    def __len__(self):
        return int(self.scores.shape[0])

    def take(self, idx) -> "ProposalArrays":
        return ProposalArrays(self.boxes[idx], self.scores[idx], self.anchors[idx])

    def to_list(self) -> list[Proposal]:
        return [
            Proposal(Box(*map(float, b)), float(s), int(a))
            for b, s, a in zip(self.boxes, self.scores, self.anchors)
        ]

    @classmethod
    def from_list(cls, props: Sequence[Proposal]) -> "ProposalArrays":
        return cls(
            boxes_to_array([p.box for p in props]),
            np.array([p.score for p in props], dtype=np.float64),
            np.array([p.source_anchor for p in props], dtype=np.int64),
        )


def label_anchor_arrays(anchors: np.ndarray, gts: np.ndarray, iou_pos: float = 0.5):
    """Array form of :func:`label_anchors`.

    Returns ``(labels, matched_gt, max_iou)``; ``matched_gt`` is -1 where no
    ground truth overlaps.
    """
    n = anchors.shape[0]
    labels = np.zeros(n, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    max_iou = np.zeros(n, dtype=np.float64)
    if gts.shape[0] == 0 or n == 0:
        return labels, matched, max_iou
    ious = iou_matrix(anchors, gts)
    best_gt = np.argmax(ious, axis=1)
    max_iou = ious[np.arange(n), best_gt]
    overlaps = max_iou > 0
    matched[overlaps] = best_gt[overlaps]
    labels[max_iou > iou_pos] = Label.POSITIVE
    # best anchor per gt is positive even below iou_pos
    best_anchor = np.argmax(ious, axis=0)
    for g, a in enumerate(best_anchor):
        if ious[a, g] > 0:
            labels[a] = Label.POSITIVE
            matched[a] = g
    return labels, matched, max_iou


def label_anchors(grid: AnchorGrid, gts: Sequence[Box], iou_pos: float = 0.5) -> list[AnchorLabel]:
    labels, matched, max_iou = label_anchor_arrays(grid.array, boxes_to_array(gts), iou_pos)
    return [
        AnchorLabel(Label(int(l)), None if m < 0 else int(m), float(v))
        for l, m, v in zip(labels, matched, max_iou)
    ]


def sample_minibatch(labels, rng_seed: int, size: int = 120, neg_per_pos: int = 5) -> SampleBatch:
    """Draw up to ``size // (1 + neg_per_pos)`` positives, fill with negatives.

    ``labels`` may be a sequence of :class:`AnchorLabel` or an int array.
    """
    if len(labels) and isinstance(labels[0], AnchorLabel):
        labels = [l.label for l in labels]
    arr = np.asarray(labels, dtype=np.int64)
    if arr.size == 0:
        raise ValueError("cannot sample a minibatch from zero anchors")
    rng = np.random.default_rng(rng_seed)
    pos = np.flatnonzero(arr == Label.POSITIVE)
    neg = np.flatnonzero(arr == Label.NEGATIVE)
    n_pos = min(pos.size, size // (1 + neg_per_pos))
    n_neg = min(neg.size, size - n_pos)
    pick_pos = rng.choice(pos, n_pos, replace=False) if n_pos else np.zeros(0, dtype=np.int64)
    pick_neg = rng.choice(neg, n_neg, replace=False) if n_neg else np.zeros(0, dtype=np.int64)
    idx = np.concatenate([pick_pos, pick_neg]).astype(np.int64)
    lab = np.concatenate([np.ones(n_pos, dtype=np.int8), np.zeros(n_neg, dtype=np.int8)])
    return SampleBatch(idx, lab)


def decode_proposal_arrays(score_map: FeatureMap, delta_map: FeatureMap, grid: AnchorGrid) -> ProposalArrays:
    """Decode every anchor's delta, clip to the image and attach its score.

    Proposals are ordered row-major over cells, then scale.  Boxes that end
    up entirely outside the image are dropped.
    """
    rows, cols, A = grid.grid_shape
    if score_map.data.shape != (A, rows, cols):
        raise ValueError(f"score map shape {score_map.data.shape} != {(A, rows, cols)}")
    if delta_map.data.shape != (4 * A, rows, cols):
        raise ValueError(f"delta map shape {delta_map.data.shape} != {(4 * A, rows, cols)}")
    scores = score_map.data.astype(np.float64).transpose(1, 2, 0).reshape(-1)
    deltas = delta_map.data.astype(np.float64).reshape(A, 4, rows, cols).transpose(2, 3, 0, 1).reshape(-1, 4)
    boxes = decode_deltas(grid.array, deltas)
    boxes, ok = clip_boxes(boxes, grid.image_size)
    scores = np.clip(scores, SCORE_EPS, 1.0 - SCORE_EPS)
    idx = np.flatnonzero(ok)
    return ProposalArrays(boxes[idx], scores[idx], idx.astype(np.int64))


def decode_proposals(score_map: FeatureMap, delta_map: FeatureMap, grid: AnchorGrid) -> list[Proposal]:
    return decode_proposal_arrays(score_map, delta_map, grid).to_list()


def select_proposal_arrays(props: ProposalArrays, nms_iou: float = 0.7, top_k: int = 1000) -> ProposalArrays:
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    keep = nms_indices(props.boxes, props.scores, nms_iou)[:top_k]
    return props.take(keep)


def select_proposals(props: Sequence[Proposal], nms_iou: float = 0.7, top_k: int = 1000) -> list[Proposal]:
    if len(props) == 0:
        if top_k < 1:
            raise ValueError("top_k must be >= 1")
        return []
    return select_proposal_arrays(ProposalArrays.from_list(props), nms_iou, top_k).to_list()


def recall_at(props_per_image, gts_per_image, iou_grid, k: float) -> np.ndarray:
    """Recall of ground truths at each IoU threshold in ``iou_grid``.

    ``k`` is the average number of proposals per image: the globally
    top-ranked ``floor(k * M)`` proposals over all M images are evaluated.
    Proposals may be given as :class:`ProposalArrays` or lists of
    :class:`Proposal`; ground truths as lists of :class:`Box` or xywh arrays.
    """
    M = len(gts_per_image)
    if len(props_per_image) != M:
        raise ValueError("proposal and ground-truth lists differ in length")
    props = [p if isinstance(p, ProposalArrays) else ProposalArrays.from_list(p) for p in props_per_image]
    gts = [g if isinstance(g, np.ndarray) else boxes_to_array(g) for g in gts_per_image]
    total_gt = sum(g.shape[0] for g in gts)
    if total_gt == 0:
        raise ValueError("no ground truths to recall")
    thresholds = np.asarray(iou_grid, dtype=np.float64)

    budget = int(math.floor(k * M + 1e-9))
    scores = np.concatenate([p.scores for p in props]) if M else np.zeros(0)
    owner = np.concatenate([np.full(len(p), i) for i, p in enumerate(props)]) if M else np.zeros(0, int)
    local = np.concatenate([np.arange(len(p)) for p in props]) if M else np.zeros(0, int)
    order = np.argsort(-scores, kind="stable")[:budget]
    chosen = [[] for _ in range(M)]
    for o in order:
        chosen[owner[o]].append(local[o])

    best = []
    for i in range(M):
        if gts[i].shape[0] == 0:
            continue
        if chosen[i]:
            ious = iou_matrix(props[i].boxes[np.sort(chosen[i])], gts[i])
            best.append(ious.max(axis=0))
        else:
            best.append(np.zeros(gts[i].shape[0]))
    best = np.concatenate(best)
    return (best[None, :] >= thresholds[:, None]).mean(axis=1)
