"""End-to-end glue shared by the CLI and the experiment harness:
scene corpus -> oracle proposals -> RoI features -> forest -> detections."""
from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from rpnbf.config import RunConfig
from rpnbf.forest import Forest, train_cascade
from rpnbf.geometry import generate_anchors, iou_matrix
from rpnbf.proposals import ProposalArrays, decode_proposal_arrays, select_proposal_arrays
from rpnbf.synth import Scene, ToyBackbone, extract_pyramid, gen_scene, oracle_rpn
from rpnbf.tensors import concat_roi_matrix, roi_pool_many

SPLITS = {"train": 0, "test": 1}


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def make_scene(cfg: RunConfig, split: str, index: int) -> Scene:
    s = cfg.synth
    seed = derive_seed(s.seed, SPLITS[split], index)
    rng = np.random.default_rng(seed)
    n_peds = int(rng.integers(s.peds[0], s.peds[1] + 1))
    n_dis = int(rng.integers(s.distractors[0], s.distractors[1] + 1))
    return gen_scene(derive_seed(seed, 1), n_peds, n_dis, tuple(s.size), tuple(s.height_range),
                     s.occlusion_prob, image_id=f"{split}_{index:05d}")


def make_corpus(cfg: RunConfig, split: str, count: int | None = None) -> list[Scene]:
    n = cfg.synth.num_train if split == "train" else cfg.synth.num_test
    return [make_scene(cfg, split, i) for i in range(n if count is None else count)]


def make_backbone(cfg: RunConfig) -> ToyBackbone:
    c = cfg.synth.channels
    return ToyBackbone.from_seed(cfg.synth.backbone_seed, *c)


def propose_scene(scene: Scene, cfg: RunConfig, top_k: int, noise_sigma: float | None = None,
                  oracle_seed: int | None = None) -> ProposalArrays:
    grid = generate_anchors(cfg.anchors, scene.size)
    sigma = cfg.synth.noise_sigma if noise_sigma is None else noise_sigma
    if oracle_seed is None:
        oracle_seed = derive_seed(cfg.synth.seed, 7, zlib.crc32(scene.image_id.encode()))
    score_map, delta_map = oracle_rpn(scene, grid, sigma, oracle_seed)
    props = decode_proposal_arrays(score_map, delta_map, grid)
    return select_proposal_arrays(props, cfg.nms_iou, top_k)


def extract_features(bb: ToyBackbone, image: np.ndarray, boxes: np.ndarray, layers) -> tuple[np.ndarray, list]:
    pyr = extract_pyramid(bb, image)
    blocks = []
    for name in layers:
        if name not in pyr:
            raise ValueError(f"unknown feature layer {name!r}; have {sorted(pyr)}")
        blocks.append((name, roi_pool_many(pyr[name], boxes)))
    return concat_roi_matrix(blocks)


def feature_length(bb: ToyBackbone, layers) -> int:
    ch = {"conv3": bb.conv3[-1].out_channels, "conv4": bb.conv4[-1].out_channels,
          "conv5": bb.conv5[-1].out_channels, "conv4_atrous": bb.conv4[-1].out_channels}
    return sum(ch[l] * 49 for l in layers)


def proposal_labels(boxes: np.ndarray, gt_boxes: np.ndarray, iou_pos: float = 0.5) -> np.ndarray:
    """+1 for proposals overlapping some ground truth at IoU > ``iou_pos``, else -1."""
    if gt_boxes.shape[0] == 0 or boxes.shape[0] == 0:
        return -np.ones(boxes.shape[0], dtype=np.int8)
    return np.where(iou_matrix(boxes, gt_boxes).max(axis=1) > iou_pos, 1, -1).astype(np.int8)


def gt_priors(gt_boxes: np.ndarray, props: ProposalArrays, iou_pos: float = 0.5) -> np.ndarray:
    """Prior score for a ground-truth training row: best score of a proposal
    covering it at IoU > ``iou_pos``, or 0.5 when none does."""
    out = np.full(gt_boxes.shape[0], 0.5)
    if gt_boxes.shape[0] == 0 or len(props) == 0:
        return out
    ious = iou_matrix(gt_boxes, props.boxes)
    for g in range(gt_boxes.shape[0]):
        hit = ious[g] > iou_pos
        if hit.any():
            out[g] = float(props.scores[hit].max())
    return out


@dataclass
class ImageRows:
    """Per-image feature rows with their metadata."""

    image_id: str
    boxes: np.ndarray
    scores: np.ndarray
    is_gt: np.ndarray
    features: np.ndarray


def image_rows(scene: Scene, bb: ToyBackbone, cfg: RunConfig, top_k: int, with_gt: bool,
               noise_sigma: float | None = None) -> ImageRows:
    props = propose_scene(scene, cfg, top_k, noise_sigma)
    boxes, scores = props.boxes, props.scores
    is_gt = np.zeros(len(props), dtype=bool)
    if with_gt and scene.gts:
        g = scene.gt_array()
        boxes = np.concatenate([boxes, g])
        scores = np.concatenate([scores, gt_priors(g, props, cfg.label_iou)])
        is_gt = np.concatenate([is_gt, np.ones(g.shape[0], dtype=bool)])
    X, _ = extract_features(bb, scene.image, boxes, cfg.layers)
    return ImageRows(scene.image_id, boxes, scores, is_gt, X)


def map_ordered(fn, items, workers: int = 1):
    """``map`` that returns results in input order regardless of ``workers``."""
    items = list(items)
    if workers <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def training_arrays(rows: list[ImageRows], gt_boxes: list[np.ndarray], iou_pos: float = 0.5):
    """Split per-image rows into positives and the negative pool.

    ``gt_boxes[i]`` holds every ground truth of ``rows[i]``'s image.
    """
    if len(rows) != len(gt_boxes):
        raise ValueError("one ground-truth array per image is required")
    pos_X, pos_s, neg_X, neg_s = [], [], [], []
    for r, g in zip(rows, gt_boxes):
        lab = proposal_labels(r.boxes, g, iou_pos)
        lab[r.is_gt] = 1
        pos_X.append(r.features[lab > 0])
        pos_s.append(r.scores[lab > 0])
        neg_X.append(r.features[lab < 0])
        neg_s.append(r.scores[lab < 0])
    d = rows[0].features.shape[1] if rows else 0
    cat = lambda xs, shape: np.concatenate(xs) if xs else np.zeros(shape)  # noqa: E731
    return (cat(pos_X, (0, d)).astype(np.float32), cat(pos_s, (0,)),
            cat(neg_X, (0, d)).astype(np.float32), cat(neg_s, (0,)))


def train_from_rows(rows: list[ImageRows], gt_boxes: list[np.ndarray], cfg: RunConfig, log=None) -> Forest:
    pos_X, pos_s, neg_X, neg_s = training_arrays(rows, gt_boxes, cfg.label_iou)
    return train_cascade(pos_X, neg_X, cfg.forest, pos_priors=pos_s, neg_priors=neg_s, log=log)
