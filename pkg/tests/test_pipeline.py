import json
from dataclasses import replace

import numpy as np
import pytest

from rpnbf.config import RunConfig
from rpnbf.experiments import desk_config, final_detections, hard_negative_fraction
from rpnbf.forest import CascadeConfig, FINAL_TREES, STAGE_TREES
from rpnbf.pipeline import (
    derive_seed,
    feature_length,
    gt_priors,
    image_rows,
    make_backbone,
    make_corpus,
    map_ordered,
    proposal_labels,
    training_arrays,
)
from rpnbf.proposals import ProposalArrays


class TestConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.nms_iou == 0.7 and cfg.train_top_k == 1000 and cfg.test_top_k == 100
        assert cfg.short_edge == 720 and cfg.detect_nms_iou is None
        assert cfg.forest.stage_trees == STAGE_TREES and cfg.forest.final_trees == FINAL_TREES
        assert cfg.forest.depth == 5
        assert cfg.eval.min_height == 50 and cfg.eval.min_visibility == 0.65

    @pytest.mark.parametrize("cfg", [RunConfig(), desk_config(4)])
    def test_round_trip(self, cfg, tmp_path):
        cfg.save(tmp_path / "c.json")
        back = RunConfig.load(tmp_path / "c.json")
        assert back == cfg
        assert back.to_json() == cfg.to_json()

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            RunConfig.from_json(json.dumps({"nope": 1}))

    def test_partial(self):
        cfg = RunConfig.from_dict({"test_top_k": 50, "forest": {"depth": 2}})
        assert cfg.test_top_k == 50 and cfg.forest == CascadeConfig(depth=2)


@pytest.fixture(scope="module")
def small():
    cfg = desk_config(1)
    cfg.synth = replace(cfg.synth, num_train=3, num_test=2)
    return cfg


class TestPipeline:
    def test_corpus_deterministic(self, small):
        a, b = make_corpus(small, "train"), make_corpus(small, "train")
        assert [s.image_id for s in a] == ["train_00000", "train_00001", "train_00002"]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.image, y.image)

    def test_splits_differ(self, small):
        assert not np.array_equal(make_corpus(small, "train", 1)[0].image, make_corpus(small, "test", 1)[0].image)

    def test_rows(self, small):
        bb = make_backbone(small)
        sc = make_corpus(small, "train", 1)[0]
        r = image_rows(sc, bb, small, 50, with_gt=True)
        assert r.features.shape == (len(r.scores), feature_length(bb, small.layers))
        assert r.is_gt.sum() == len(sc.gts)
        np.testing.assert_array_equal(r.boxes[r.is_gt], sc.gt_array())

    def test_training_arrays_labels(self, small):
        bb = make_backbone(small)
        scenes = make_corpus(small, "train")
        rows = [image_rows(sc, bb, small, 40, True) for sc in scenes]
        pX, ps, nX, ns = training_arrays(rows, [sc.gt_array() for sc in scenes])
        n_pos = sum(int((proposal_labels(r.boxes, sc.gt_array()) > 0).sum() + 0) for r, sc in zip(rows, scenes))
        assert pX.shape[0] == n_pos and pX.shape[0] + nX.shape[0] == sum(len(r.scores) for r in rows)
        assert 0 <= hard_negative_fraction(rows, scenes) <= 1

    def test_labels_strict(self):
        g = np.array([[0, 0, 10, 10]], dtype=float)
        b = np.array([[0, 0, 10, 20], [0, 0, 10, 19]], dtype=float)
        assert proposal_labels(b, g).tolist() == [-1, 1]
        assert proposal_labels(b, np.zeros((0, 4))).tolist() == [-1, -1]

    def test_gt_priors(self):
        g = np.array([[0, 0, 10, 10], [50, 50, 10, 10]], dtype=float)
        props = ProposalArrays(np.array([[0, 0, 10, 10], [1, 0, 10, 10]], dtype=float), np.array([0.3, 0.8]),
                               np.arange(2))
        assert gt_priors(g, props).tolist() == [0.8, 0.5]

    def test_map_ordered(self):
        assert map_ordered(lambda x: x * x, range(10), workers=4) == [x * x for x in range(10)]

    def test_derive_seed(self):
        assert derive_seed(1, 2) == derive_seed(1, 2) != derive_seed(2, 1)

    def test_final_detections(self):
        boxes = np.array([[0, 0, 10, 10], [1, 0, 10, 10], [50, 50, 5, 5]], dtype=float)
        s = np.array([0.2, 0.9, 0.5])
        b, sc = final_detections(boxes, s, 0.5)
        assert sc.tolist() == [0.9, 0.5]
        assert final_detections(boxes, s, None)[1] is s
