"""Box algebra: IoU, anchor grids, box-delta transforms and NMS.

Boxes are continuous ``(x, y, w, h)`` rectangles in image pixels.  Corner
form is only used internally.  Vectorised helpers operate on ``(N, 4)``
float64 arrays in the same ``xywh`` layout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

# decode_delta clamps log-size deltas here before exponentiating
MAX_LOG_RATIO = math.log(1000.0 / 16.0)


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for v in (self.x, self.y, self.w, self.h):
            if not math.isfinite(v):
                raise ValueError(f"non-finite box coordinate in {self!r}")
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box must have positive width and height, got {self!r}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def cx(self) -> float:
        return self.x + 0.5 * self.w

    @property
    def cy(self) -> float:
        return self.y + 0.5 * self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


class Delta(NamedTuple):
    """Regression offsets of a box relative to an anchor."""

    tx: float
    ty: float
    tw: float
    th: float


@dataclass(frozen=True)
class AnchorConfig:
    base_height: float = 40.0
    scale_step: float = 1.3
    num_scales: int = 9
    aspect_ratio: float = 0.41
    stride: int = 16

    def __post_init__(self):
        if not self.scale_step > 1:
            raise ValueError("scale_step must be > 1")
        if self.num_scales < 1:
            raise ValueError("num_scales must be >= 1")
        if not self.aspect_ratio > 0:
            raise ValueError("aspect_ratio must be > 0")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not self.base_height > 0:
            raise ValueError("base_height must be > 0")

    def heights(self) -> np.ndarray:
        """Anchor heights, one per scale, each ``scale_step`` times the last."""
        return self.base_height * self.scale_step ** np.arange(self.num_scales, dtype=np.float64)


@dataclass(frozen=True)
class AnchorGrid:
    """Anchors laid out row-major over stride cells, then by scale index.

    ``array`` holds the anchors as an ``(rows*cols*scales, 4)`` xywh array;
    :attr:`anchors` materialises them as :class:`Box` objects.
    """

    array: np.ndarray
    grid_shape: tuple[int, int, int]
    config: AnchorConfig
    image_size: tuple[int, int]

    def __len__(self) -> int:
        return self.array.shape[0]

    @property
    def anchors(self) -> list[Box]:
        return [Box(*map(float, row)) for row in self.array]

    def index(self, row: int, col: int, scale: int) -> int:
        rows, cols, scales = self.grid_shape
        return (row * cols + col) * scales + scale


def iou(a: Box, b: Box) -> float:
    # areas come from the corners so identical boxes give exactly 1
    ax2, ay2, bx2, by2 = a.x + a.w, a.y + a.h, b.x + b.w, b.y + b.h
    iw = min(ax2, bx2) - max(a.x, b.x)
    ih = min(ay2, by2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return min(inter / ((ax2 - a.x) * (ay2 - a.y) + (bx2 - b.x) * (by2 - b.y) - inter), 1.0)


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64)


def array_to_boxes(arr: np.ndarray) -> list[Box]:
    return [Box(*map(float, row)) for row in np.asarray(arr, dtype=np.float64)]


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two ``(N, 4)`` and ``(M, 4)`` xywh arrays.

    Uses the same operation order as :func:`iou` so scalar and vectorised
    results agree bit for bit.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax2 = a[:, 0] + a[:, 2]
    ay2 = a[:, 1] + a[:, 3]
    bx2 = b[:, 0] + b[:, 2]
    by2 = b[:, 1] + b[:, 3]
    iw = np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(ay2[:, None], by2[None, :]) - np.maximum(a[:, None, 1], b[None, :, 1])
    valid = (iw > 0) & (ih > 0)
    inter = np.where(valid, iw * ih, 0.0)
    area_a = (ax2 - a[:, 0]) * (ay2 - a[:, 1])
    area_b = (bx2 - b[:, 0]) * (by2 - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=valid)
    return np.minimum(out, 1.0, out=out)


def generate_anchors(cfg: AnchorConfig, image_size: tuple[int, int]) -> AnchorGrid:
    """Place ``cfg.num_scales`` anchors at the centre of every stride cell.

    The grid has ``ceil(W / stride)`` columns and ``ceil(H / stride)`` rows,
    matching a feature map reached through same-padded stride-2 stages.
    Anchors that cross the image boundary are kept.
    """
    width, height = image_size
    if width < cfg.stride or height < cfg.stride:
        raise ValueError(f"image {image_size} is smaller than one stride cell ({cfg.stride} px)")
    cols = -(-int(width) // cfg.stride)
    rows = -(-int(height) // cfg.stride)
    hs = cfg.heights()
    ws = cfg.aspect_ratio * hs
    cy = (np.arange(rows, dtype=np.float64) + 0.5) * cfg.stride
    cx = (np.arange(cols, dtype=np.float64) + 0.5) * cfg.stride
    cyy, cxx, hh = np.meshgrid(cy, cx, hs, indexing="ij")
    ww = cfg.aspect_ratio * hh
    arr = np.stack([cxx - 0.5 * ww, cyy - 0.5 * hh, ww, hh], axis=-1).reshape(-1, 4)
    return AnchorGrid(arr, (rows, cols, cfg.num_scales), cfg, (int(width), int(height)))


def encode_delta(anchor: Box, target: Box) -> Delta:
    return Delta(
        (target.cx - anchor.cx) / anchor.w,
        (target.cy - anchor.cy) / anchor.h,
        math.log(target.w / anchor.w),
        math.log(target.h / anchor.h),
    )


def decode_delta(anchor: Box, d: Delta) -> Box:
    tw = min(d.tw, MAX_LOG_RATIO)
    th = min(d.th, MAX_LOG_RATIO)
    w = anchor.w * math.exp(tw)
    h = anchor.h * math.exp(th)
    cx = anchor.cx + d.tx * anchor.w
    cy = anchor.cy + d.ty * anchor.h
    return Box(cx - 0.5 * w, cy - 0.5 * h, w, h)


def encode_deltas(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorised :func:`encode_delta` over matching rows of two xywh arrays."""
    a = np.asarray(anchors, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    acx = a[:, 0] + 0.5 * a[:, 2]
    acy = a[:, 1] + 0.5 * a[:, 3]
    tcx = t[:, 0] + 0.5 * t[:, 2]
    tcy = t[:, 1] + 0.5 * t[:, 3]
    return np.stack(
        [(tcx - acx) / a[:, 2], (tcy - acy) / a[:, 3], np.log(t[:, 2] / a[:, 2]), np.log(t[:, 3] / a[:, 3])],
        axis=1,
    )


def decode_deltas(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Vectorised :func:`decode_delta`; returns an xywh array."""
    a = np.asarray(anchors, dtype=np.float64)
    d = np.asarray(deltas, dtype=np.float64)
    w = a[:, 2] * np.exp(np.minimum(d[:, 2], MAX_LOG_RATIO))
    h = a[:, 3] * np.exp(np.minimum(d[:, 3], MAX_LOG_RATIO))
    cx = (a[:, 0] + 0.5 * a[:, 2]) + d[:, 0] * a[:, 2]
    cy = (a[:, 1] + 0.5 * a[:, 3]) + d[:, 1] * a[:, 3]
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, w, h], axis=1)


def clip_box(b: Box, image_size: tuple[float, float]) -> Box:
    width, height = image_size
    x1, y1 = max(b.x, 0.0), max(b.y, 0.0)
    x2, y2 = min(b.x2, float(width)), min(b.y2, float(height))
    if x2 <= x1 or y2 <= y1:
        raise ValueError(f"{b!r} lies outside the {width}x{height} image")
    return Box(x1, y1, x2 - x1, y2 - y1)


def clip_boxes(arr: np.ndarray, image_size: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
    """Clip an xywh array to the image.

    Returns the clipped array and a boolean mask of rows that still have
    positive area; rows outside the image are left unclipped in the output.
    """
    width, height = image_size
    arr = np.asarray(arr, dtype=np.float64)
    x1 = np.maximum(arr[:, 0], 0.0)
    y1 = np.maximum(arr[:, 1], 0.0)
    x2 = np.minimum(arr[:, 0] + arr[:, 2], float(width))
    y2 = np.minimum(arr[:, 1] + arr[:, 3], float(height))
    ok = (x2 > x1) & (y2 > y1)
    out = np.where(ok[:, None], np.stack([x1, y1, x2 - x1, y2 - y1], axis=1), arr)
    return out, ok


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS over arrays; returns kept indices in descending-score order.

    Equal scores are resolved by the lower input index.
    """
    from rpnbf import kernels

    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.ascontiguousarray(scores, dtype=np.float64).reshape(-1)
    if boxes.shape[0] != scores.shape[0]:
        raise ValueError("boxes and scores differ in length")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    return kernels.backend.nms(boxes, scores, float(iou_threshold))


def nms(dets: Sequence[tuple[Box, float]], iou_threshold: float) -> list[tuple[Box, float]]:
    if len(dets) == 0:
        return []
    arr = boxes_to_array([d[0] for d in dets])
    scores = np.array([d[1] for d in dets], dtype=np.float64)
    keep = nms_indices(arr, scores, iou_threshold)
    return [dets[i] for i in keep]
