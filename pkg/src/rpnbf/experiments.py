"""Desk-scale ablations on the synthetic corpus.

:func:`bootstrap_ablation` trains the bootstrapped cascade and a
single-stage forest without mining on the same data and reports MR-2 of
both, of the raw proposal scores, and of every ranking at IoU 0.5 and 0.7.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from rpnbf.config import RunConfig
from rpnbf.evaluation import evaluate, filter_reasonable
from rpnbf.forest import CascadeConfig, Forest, loss_is_monotone, train_cascade
from rpnbf.geometry import iou_matrix, nms_indices
from rpnbf.pipeline import image_rows, make_backbone, make_corpus, proposal_labels, training_arrays


def desk_config(seed: int = 0, **synth_overrides) -> RunConfig:
    """Small-set configuration for the 200/100 synthetic corpus.

    Depth-2 trees on the full stage schedule, 100 training proposals per
    image, three to six distractors per scene (about a third of the
    negative pool then overlaps a distractor), and NMS at 0.5 on the
    scored detections.
    """
    cfg = RunConfig()
    cfg.train_top_k = 100
    cfg.detect_nms_iou = 0.5
    cfg.forest = CascadeConfig(depth=2, seed=seed)
    cfg.synth = replace(cfg.synth, seed=seed, **{"distractors": [3, 6], **synth_overrides})
    return cfg


@dataclass
class AblationResult:
    seed: int
    mr2: dict = field(default_factory=dict)  # (ranking, iou) -> MR-2
    mr4: dict = field(default_factory=dict)
    hard_fraction: float = 0.0
    stage_history: list = field(default_factory=list)
    monotone_loss: bool = True
    timings: dict = field(default_factory=dict)


def final_detections(boxes, scores, nms_iou):
    if nms_iou is None:
        return boxes, scores
    keep = nms_indices(boxes, scores, nms_iou)
    return boxes[keep], scores[keep]


def ground_truth_table(scenes, cfg: RunConfig):
    out = {}
    for sc in scenes:
        gts = filter_reasonable(sc.gts, cfg.eval.min_height, cfg.eval.min_visibility)
        boxes = np.array([g.box.as_tuple() for g in gts], dtype=np.float64).reshape(-1, 4)
        out[sc.image_id] = (boxes, np.array([g.ignore for g in gts], dtype=bool))
    return out


def hard_negative_fraction(rows, scenes, iou: float = 0.3) -> float:
    """Share of negative proposals overlapping a distractor at IoU >= ``iou``."""
    hard = total = 0
    for r, sc in zip(rows, scenes):
        lab = proposal_labels(r.boxes, sc.gt_array())
        neg = r.boxes[(lab < 0) & ~r.is_gt]
        total += neg.shape[0]
        d = sc.distractor_array()
        if d.shape[0] and neg.shape[0]:
            hard += int(np.count_nonzero(iou_matrix(neg, d).max(axis=1) >= iou))
    return hard / max(total, 1)


def bootstrap_ablation(cfg: RunConfig, log=None) -> AblationResult:
    res = AblationResult(seed=cfg.synth.seed)
    t0 = time.perf_counter()
    bb = make_backbone(cfg)
    train = make_corpus(cfg, "train")
    test = make_corpus(cfg, "test")
    train_rows = [image_rows(sc, bb, cfg, cfg.train_top_k, cfg.include_gt) for sc in train]
    test_rows = [image_rows(sc, bb, cfg, cfg.test_top_k, False) for sc in test]
    res.hard_fraction = hard_negative_fraction(train_rows, train)
    pos_X, pos_s, neg_X, neg_s = training_arrays(train_rows, [sc.gt_array() for sc in train], cfg.label_iou)
    res.timings["data"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    cascade = train_cascade(pos_X, neg_X, cfg.forest, pos_priors=pos_s, neg_priors=neg_s, log=log)
    res.timings["cascade"] = time.perf_counter() - t0
    res.stage_history = cascade.stage_history
    t0 = time.perf_counter()
    single_cfg = replace(cfg.forest, stage_trees=(), hard_negative_fraction=0.0)
    single = train_cascade(pos_X, neg_X, single_cfg, pos_priors=pos_s, neg_priors=neg_s)
    res.timings["single"] = time.perf_counter() - t0

    res.monotone_loss = all(loss_is_monotone(h) for f in (cascade, single) for h in f.stage_losses)

    gt_table = ground_truth_table(test, cfg)
    rankings = {
        "proposals": lambda r: r.scores,
        "cascade": lambda r: cascade.score_many(r.features, r.scores),
        "single": lambda r: single.score_many(r.features, r.scores),
    }
    for name, fn in rankings.items():
        dets = {r.image_id: final_detections(r.boxes, fn(r), cfg.detect_nms_iou) for r in test_rows}
        for iou in (0.5, 0.7):
            c = evaluate(dets, gt_table, iou)
            res.mr2[(name, iou)] = c.mr2
            res.mr4[(name, iou)] = c.mr4
    return res


def models_for(cfg: RunConfig) -> tuple[Forest, Forest]:  # pragma: no cover - convenience
    bb = make_backbone(cfg)
    train = make_corpus(cfg, "train")
    rows = [image_rows(sc, bb, cfg, cfg.train_top_k, cfg.include_gt) for sc in train]
    pos_X, pos_s, neg_X, neg_s = training_arrays(rows, [sc.gt_array() for sc in train], cfg.label_iou)
    cascade = train_cascade(pos_X, neg_X, cfg.forest, pos_priors=pos_s, neg_priors=neg_s)
    single = train_cascade(pos_X, neg_X, replace(cfg.forest, stage_trees=(), hard_negative_fraction=0.0),
                           pos_priors=pos_s, neg_priors=neg_s)
    return cascade, single
