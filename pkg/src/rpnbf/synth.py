"""Deterministic desk-scale fixtures.

Scenes are single-channel images with textured pedestrian boxes (aspect
0.41) and pole-like distractors of the same shape.  A seeded random
backbone turns an image into stride 4/8/16 feature maps, and an oracle
stands in for a trained RPN head with tunable noise.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from rpnbf.evaluation import GroundTruthBox
from rpnbf.geometry import AnchorGrid, Box, boxes_to_array, encode_deltas, iou_matrix
from rpnbf.proposals import SCORE_EPS, label_anchor_arrays
from rpnbf.tensors import FeatureMap, FilterBank, atrous_stage, conv2d, max_pool

ASPECT = 0.41
MAX_OVERLAP = 0.3
MAX_TRIES = 200


@dataclass
class Scene:
    image: np.ndarray  # (H, W) float32
    gts: list = field(default_factory=list)  # GroundTruthBox
    distractors: list = field(default_factory=list)  # Box
    image_id: str = ""

    @property
    def size(self) -> tuple[int, int]:
        return (self.image.shape[1], self.image.shape[0])

    def gt_array(self) -> np.ndarray:
        return boxes_to_array([g.box for g in self.gts])

    def distractor_array(self) -> np.ndarray:
        return boxes_to_array(self.distractors)


def _place(rng, size, h_range, placed):
    W, H = size
    for _ in range(MAX_TRIES):
        h = float(rng.uniform(h_range[0], min(h_range[1], H)))
        w = ASPECT * h
        x = float(rng.uniform(0, W - w))
        y = float(rng.uniform(0, H - h))
        cand = np.array([[x, y, w, h]])
        if not placed or iou_matrix(cand, np.array(placed)).max() <= MAX_OVERLAP:
            return x, y, w, h
    raise RuntimeError(f"could not place an object without exceeding IoU {MAX_OVERLAP} after {MAX_TRIES} tries")


def _paint_pedestrian(img, rng, x, y, w, h, visibility):
    H, W = img.shape
    x0, y0 = int(round(x)), int(round(y))
    x1, y1 = min(W, int(round(x + w))), min(H, int(round(y + h)))
    hh, ww = y1 - y0, x1 - x0
    if hh < 2 or ww < 2:
        return
    yy, xx = np.mgrid[0:hh, 0:ww].astype(np.float32)
    u = (xx + 0.5) / ww - 0.5  # horizontal, centred
    v = (yy + 0.5) / hh  # vertical, 0 at top
    tone = rng.uniform(0.55, 0.95)
    patch = np.full((hh, ww), np.nan, dtype=np.float32)
    head = ((u / 0.22) ** 2 + ((v - 0.09) / 0.085) ** 2) <= 1.0
    torso = (v >= 0.17) & (v < 0.55) & (np.abs(u) <= 0.45 - 0.1 * (v - 0.17))
    legs = (v >= 0.55) & (np.abs(u) >= 0.05) & (np.abs(u) <= 0.36)
    patch[head] = 0.9
    patch[torso] = tone
    patch[legs] = tone * rng.uniform(0.35, 0.6)
    patch += rng.normal(0, 0.03, patch.shape).astype(np.float32)
    cutoff = visibility * hh
    patch[yy >= cutoff] = np.nan
    region = img[y0:y1, x0:x1]
    mask = ~np.isnan(patch)
    region[mask] = patch[mask]


def _paint_distractor(img, rng, x, y, w, h):
    H, W = img.shape
    x0, y0 = int(round(x)), int(round(y))
    x1, y1 = min(W, int(round(x + w))), min(H, int(round(y + h)))
    hh, ww = y1 - y0, x1 - x0
    if hh < 2 or ww < 2:
        return
    xx = (np.arange(ww, dtype=np.float32) + 0.5) / ww - 0.5
    half = rng.uniform(0.15, 0.3)
    bar = np.abs(xx) <= half
    tone = rng.uniform(0.55, 0.95)
    # vertical stripes of bark / pole texture
    stripes = 0.08 * np.sin(xx * rng.uniform(20, 40) + rng.uniform(0, 6.28))
    patch = np.broadcast_to((tone + stripes)[None, :], (hh, ww)).astype(np.float32).copy()
    patch += rng.normal(0, 0.03, patch.shape).astype(np.float32)
    region = img[y0:y1, x0:x1]
    region[:, bar] = patch[:, bar]


def gen_scene(seed: int, n_peds: int, n_distractors: int, size: tuple[int, int] = (320, 240),
              height_range: tuple[float, float] = (40.0, 200.0), occlusion_prob: float = 0.15,
              image_id: str = "") -> Scene:
    """Render one scene; identical seeds give identical pixels and boxes."""
    W, H = size
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float32)
    gx, gy = rng.normal(0, 0.1, 2)
    img = (0.35 + gx * xx / W + gy * yy / H).astype(np.float32)
    img += rng.normal(0, 0.05, (H, W)).astype(np.float32)

    placed = []
    gts = []
    for _ in range(n_peds):
        x, y, w, h = _place(rng, size, height_range, placed)
        placed.append([x, y, w, h])
        vis = 1.0
        if rng.random() < occlusion_prob:
            vis = float(rng.uniform(0.4, 0.9))
        _paint_pedestrian(img, rng, x, y, w, h, vis)
        gts.append(GroundTruthBox(Box(x, y, w, h), height=h, visibility=vis))
    distractors = []
    for _ in range(n_distractors):
        x, y, w, h = _place(rng, size, height_range, placed)
        placed.append([x, y, w, h])
        _paint_distractor(img, rng, x, y, w, h)
        distractors.append(Box(x, y, w, h))
    return Scene(img.astype(np.float32), gts, distractors, image_id)


@dataclass
class ToyBackbone:
    """Fixed random conv stack: stem to stride 4, then conv3 / conv4 / conv5."""

    stem: list
    conv3: list
    conv4: list
    conv5: list
    seed: int = 0

    @classmethod
    def from_seed(cls, seed: int = 0, stem_channels: int = 6, conv3_channels: int = 8,
                  conv4_channels: int = 12, conv5_channels: int = 16) -> "ToyBackbone":
        rng = np.random.default_rng(seed)

        def bank(cin, cout):
            w = rng.normal(0, 1.0 / np.sqrt(9 * cin), (cout, cin, 3, 3))
            b = rng.normal(0.05, 0.05, cout)
            return FilterBank(w.astype(np.float32), b.astype(np.float32), relu=True)

        stem = [bank(1, stem_channels), bank(stem_channels, stem_channels)]
        return cls(
            stem=stem,
            conv3=[bank(stem_channels, conv3_channels)],
            conv4=[bank(conv3_channels, conv4_channels)],
            conv5=[bank(conv4_channels, conv5_channels)],
            seed=seed,
        )


LAYER_STRIDES = {"conv3": 4, "conv4": 8, "conv5": 16, "conv4_atrous": 4}


def extract_pyramid(bb: ToyBackbone, image) -> dict:
    """Feature maps ``conv3`` (stride 4), ``conv4`` (8), ``conv5`` (16) and
    ``conv4_atrous`` (4, the à trous version of conv4)."""
    if isinstance(image, FeatureMap):
        x = image
    else:
        arr = np.asarray(image, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None]
        x = FeatureMap(arr, 1.0)
    if x.height < 16 or x.width < 16:
        raise ValueError(f"image {x.width}x{x.height} is smaller than 16 px per side")
    x = conv2d(x, bb.stem[0])
    x = max_pool(x, 2, 2)
    x = conv2d(x, bb.stem[1])
    x = max_pool(x, 2, 2)
    c3 = x
    for fb in bb.conv3:
        c3 = conv2d(c3, fb)
    c4 = max_pool(c3, 2, 2)
    for fb in bb.conv4:
        c4 = conv2d(c4, fb)
    c5 = max_pool(c4, 2, 2)
    for fb in bb.conv5:
        c5 = conv2d(c5, fb)
    c4a = atrous_stage(c3, 2, bb.conv4)
    return {"conv3": c3, "conv4": c4, "conv5": c5, "conv4_atrous": c4a}


def oracle_rpn(scene: Scene, grid: AnchorGrid, noise_sigma: float, seed: int, distractor_score: float = 0.5):
    """Score and delta maps of an idealised RPN with Gaussian noise.

    Anchor score is its best IoU with a ground truth, raised to
    ``distractor_score`` for anchors overlapping a distractor at IoU > 0.5,
    plus noise, clamped to ``(0, 1)``.  Positive anchors (labeler rule)
    regress to their ground truth plus noise; others predict zero deltas.
    """
    rows, cols, A = grid.grid_shape
    anchors = grid.array
    n = anchors.shape[0]
    rng = np.random.default_rng(seed)
    score_noise = rng.normal(0.0, 1.0, n) * noise_sigma
    delta_noise = rng.normal(0.0, 1.0, (n, 4)) * noise_sigma

    gts = scene.gt_array()
    labels, matched, max_iou = label_anchor_arrays(anchors, gts)
    base = max_iou.copy()
    dis = scene.distractor_array()
    if dis.shape[0]:
        dis_iou = iou_matrix(anchors, dis).max(axis=1)
        base = np.where(dis_iou > 0.5, np.maximum(base, distractor_score), base)
    scores = np.clip(base + score_noise, SCORE_EPS, 1.0 - SCORE_EPS)

    deltas = np.zeros((n, 4))
    pos = np.flatnonzero(labels == 1)
    if pos.size:
        deltas[pos] = encode_deltas(anchors[pos], gts[matched[pos]]) + delta_noise[pos]

    score_map = scores.reshape(rows, cols, A).transpose(2, 0, 1)
    delta_map = deltas.reshape(rows, cols, A, 4).transpose(2, 3, 0, 1).reshape(4 * A, rows, cols)
    stride = grid.config.stride
    return FeatureMap(score_map, stride), FeatureMap(delta_map, stride)
