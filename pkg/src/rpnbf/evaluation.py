"""Miss-rate / FPPI evaluation in the Caltech pedestrian style.

Ground truths outside the "reasonable" subset become ignore regions:
detections matching them are neither true nor false positives.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from rpnbf.geometry import Box, boxes_to_array, iou_matrix

MR_FLOOR = 1e-10

TP, FP, IGNORED = 1, 0, -1
MATCHED, MISSED = 1, 0


@dataclass(frozen=True)
class GroundTruthBox:
    box: Box
    height: float
    visibility: float = 1.0
    ignore: bool = False


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: Box
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError("detection score must be finite")


@dataclass
class ImageMatch:
    """Outcome of matching one image.

    ``det_status`` is aligned with the input detections (TP=1, FP=0,
    ignored=-1); ``gt_status`` with the ground truths (matched=1, missed=0,
    ignored=-1); ``det_gt`` is the matched gt index or -1.
    """

    scores: np.ndarray
    det_status: np.ndarray
    det_gt: np.ndarray
    gt_status: np.ndarray


@dataclass
class EvalCurve:
    thresholds: np.ndarray
    fppi: np.ndarray
    miss_rate: np.ndarray

    def __len__(self):
        return int(self.fppi.shape[0])

    @property
    def mr2(self) -> float:
        return log_average_mr(self, 1e-2, 1.0)

    @property
    def mr4(self) -> float:
        return log_average_mr(self, 1e-4, 1.0)


def filter_reasonable(gts: Sequence[GroundTruthBox], min_height: float = 50.0,
                      min_visibility: float = 0.65) -> list[GroundTruthBox]:
    """Flag ground truths shorter or more occluded than the bounds (inclusive)."""
    return [replace(g, ignore=not (g.height >= min_height and g.visibility >= min_visibility)) for g in gts]


def match_arrays(boxes: np.ndarray, scores: np.ndarray, gt_boxes: np.ndarray, gt_ignore: np.ndarray,
                 iou_thresh: float = 0.5) -> ImageMatch:
    """Greedy matching on arrays; see :func:`match_image`."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_ignore = np.asarray(gt_ignore, dtype=bool).reshape(-1)
    n, m = boxes.shape[0], gt_boxes.shape[0]
    det_status = np.full(n, FP, dtype=np.int8)
    det_gt = np.full(n, -1, dtype=np.int64)
    gt_status = np.where(gt_ignore, IGNORED, MISSED).astype(np.int8)
    if n == 0 or m == 0:
        return ImageMatch(scores, det_status, det_gt, gt_status)
    ious = iou_matrix(boxes, gt_boxes)
    taken = np.zeros(m, dtype=bool)
    for d in np.argsort(-scores, kind="stable"):
        cand = np.where(~gt_ignore & ~taken & (ious[d] >= iou_thresh), ious[d], -1.0)
        g = int(np.argmax(cand))
        if cand[g] >= 0:
            taken[g] = True
            det_status[d] = TP
            det_gt[d] = g
            gt_status[g] = MATCHED
        elif np.any(gt_ignore & (ious[d] >= iou_thresh)):
            det_status[d] = IGNORED
    return ImageMatch(scores, det_status, det_gt, gt_status)


def match_image(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], iou_thresh: float = 0.5) -> ImageMatch:
    """Greedy score-ordered matching of one image's detections.

    Each detection, from highest score down (ties in input order), takes the
    unmatched non-ignored ground truth it overlaps most at IoU >= threshold.
    Failing that it is dropped from scoring if it overlaps an ignored ground
    truth at the same threshold, and counts as a false positive otherwise.
    """
    return match_arrays(
        boxes_to_array([d.box for d in dets]),
        np.array([d.score for d in dets], dtype=np.float64),
        boxes_to_array([g.box for g in gts]),
        np.array([g.ignore for g in gts], dtype=bool),
        iou_thresh,
    )


def curve(matches: Sequence[ImageMatch], num_images: int) -> EvalCurve:
    """Sweep the score threshold over every distinct detection score.

    The first point (threshold ``+inf``) is the empty detector.
    """
    if num_images < 1:
        raise ValueError("num_images must be >= 1")
    total = sum(int(np.count_nonzero(m.gt_status != IGNORED)) for m in matches)
    if total == 0:
        raise ValueError("no non-ignored ground truths to evaluate")
    if matches:
        scores = np.concatenate([m.scores for m in matches])
        status = np.concatenate([m.det_status for m in matches])
    else:
        scores, status = np.zeros(0), np.zeros(0, dtype=np.int8)
    keep = status != IGNORED
    scores, status = scores[keep], status[keep]
    order = np.argsort(-scores, kind="stable")
    scores, status = scores[order], status[order]
    tp = np.cumsum(status == TP)
    fp = np.cumsum(status == FP)
    # one operating point per distinct score: the last detection of each run
    last = np.ones(scores.shape[0], dtype=bool)
    last[:-1] = scores[1:] != scores[:-1]
    thr = np.concatenate([[np.inf], scores[last]])
    fppi = np.concatenate([[0.0], fp[last] / num_images])
    mr = np.concatenate([[1.0], 1.0 - tp[last] / total])
    return EvalCurve(thr, fppi.astype(np.float64), mr.astype(np.float64))


def log_average_mr(c: EvalCurve, fppi_lo: float = 1e-2, fppi_hi: float = 1.0, points: int = 9) -> float:
    """Geometric mean of miss rates at log-spaced reference FPPIs.

    At each reference the operating point with the largest FPPI not above it
    is used (the last such point in sweep order); if none exists the curve's
    highest miss rate is used.
    """
    if len(c) == 0:
        raise ValueError("empty curve")
    refs = np.logspace(math.log10(fppi_lo), math.log10(fppi_hi), points)
    fallback = float(c.miss_rate.max())
    vals = []
    for r in refs:
        i = int(np.searchsorted(c.fppi, r, side="right")) - 1
        vals.append(fallback if i < 0 else float(c.miss_rate[i]))
    vals = np.maximum(np.asarray(vals), MR_FLOOR)
    if np.all(vals == vals[0]):
        # exp(log(v)) need not round-trip
        return float(vals[0])
    return float(np.exp(np.mean(np.log(vals))))


def evaluate(dets_by_image: dict, gts_by_image: dict, iou_thresh: float = 0.5) -> EvalCurve:
    """Match and sweep a whole set.

    ``dets_by_image`` maps image id to ``(boxes, scores)``;
    ``gts_by_image`` maps image id to ``(boxes, ignore_flags)``.  Every image
    in ``gts_by_image`` counts toward FPPI, including ones without detections.
    """
    ids = sorted(gts_by_image)
    unknown = set(dets_by_image) - set(ids)
    if unknown:
        raise ValueError(f"detections for unknown images: {sorted(unknown)[:5]}")
    matches = []
    for i in ids:
        boxes, scores = dets_by_image.get(i, (np.zeros((0, 4)), np.zeros(0)))
        gb, gi = gts_by_image[i]
        matches.append(match_arrays(boxes, scores, gb, gi, iou_thresh))
    return curve(matches, len(ids))


def _fmt(v: float) -> str:
    return repr(float(v))


def curve_csv(c: EvalCurve) -> str:
    if len(c) == 0:
        raise ValueError("empty curve")
    lines = ["threshold,fppi,miss_rate"]
    lines += [f"{_fmt(t)},{_fmt(f)},{_fmt(m)}" for t, f, m in zip(c.thresholds, c.fppi, c.miss_rate)]
    lines.append(f"# mr2={_fmt(c.mr2)},mr4={_fmt(c.mr4)}")
    return "\n".join(lines) + "\n"


def curve_svg(c: EvalCurve, label: str = "detector") -> str:
    """Log-log miss-rate vs FPPI plot with the summary in the legend."""
    if len(c) == 0:
        raise ValueError("empty curve")
    W, H, pad = 480, 400, 50
    x_lo, x_hi = -4.0, 1.0  # log10 FPPI
    y_lo, y_hi = math.log10(0.05), 0.0  # log10 miss rate

    def px(f):
        lf = math.log10(min(max(f, 10 ** x_lo), 10 ** x_hi))
        return pad + (lf - x_lo) / (x_hi - x_lo) * (W - 2 * pad)

    def py(m):
        lm = math.log10(min(max(m, 10 ** y_lo), 1.0))
        return H - pad - (lm - y_lo) / (y_hi - y_lo) * (H - 2 * pad)

    pts = []
    prev_m = None
    for f, m in zip(c.fppi, c.miss_rate):
        if prev_m is not None:
            pts.append(f"{px(f):.2f},{py(prev_m):.2f}")
        pts.append(f"{px(f):.2f},{py(m):.2f}")
        prev_m = m
    pts.append(f"{px(10 ** x_hi):.2f},{py(prev_m):.2f}")
    ticks = []
    for e in range(int(x_lo), int(x_hi) + 1):
        x = px(10.0 ** e)
        ticks.append(f'<line x1="{x:.2f}" y1="{pad}" x2="{x:.2f}" y2="{H - pad}" stroke="#ddd"/>')
        ticks.append(f'<text x="{x:.2f}" y="{H - pad + 16}" font-size="11" text-anchor="middle">1e{e}</text>')
    for m in (0.05, 0.1, 0.2, 0.3, 0.5, 0.64, 0.8, 1.0):
        y = py(m)
        ticks.append(f'<line x1="{pad}" y1="{y:.2f}" x2="{W - pad}" y2="{y:.2f}" stroke="#ddd"/>')
        ticks.append(f'<text x="{pad - 4}" y="{y + 4:.2f}" font-size="11" text-anchor="end">{m:g}</text>')
    legend = escape(f"{100 * c.mr2:.2f}% {label} (MR-2), {100 * c.mr4:.2f}% (MR-4)")
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="{pad}" y="{pad}" width="{W - 2 * pad}" height="{H - 2 * pad}" fill="white" stroke="black"/>',
        *ticks,
        f'<polyline fill="none" stroke="#c00" stroke-width="2" points="{" ".join(pts)}"/>',
        f'<text x="{W / 2:.0f}" y="{H - 12}" font-size="12" text-anchor="middle">false positives per image</text>',
        f'<text x="14" y="{H / 2:.0f}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {H / 2:.0f})">miss rate</text>',
        f'<text x="{W - pad - 6}" y="{pad + 18}" font-size="12" text-anchor="end">{legend}</text>',
        "</svg>",
    ]) + "\n"


def export_curve(c: EvalCurve, path, svg_path=None, label: str = "detector") -> None:
    text = curve_csv(c)
    with open(path, "w", newline="") as fh:
        fh.write(text)
    if svg_path is not None:
        with open(svg_path, "w") as fh:
            fh.write(curve_svg(c, label))
