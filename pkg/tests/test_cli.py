import json
from dataclasses import replace

import numpy as np
import pytest

from rpnbf.cli import main
from rpnbf.config import RunConfig
from rpnbf.experiments import desk_config
from rpnbf.forest import CascadeConfig, load_model, loss_is_monotone, score
from rpnbf.formats import read_detections, read_features, read_scenes
from rpnbf.pipeline import extract_features, make_backbone, propose_scene


def tiny_config() -> RunConfig:
    cfg = desk_config(3)
    cfg.synth = replace(cfg.synth, num_train=6, num_test=4)
    cfg.forest = CascadeConfig(stage_trees=(2, 4), final_trees=8, depth=2, seed=3)
    return cfg


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """One full tiny quickstart, shared by the tests below."""
    d = tmp_path_factory.mktemp("qs")
    cfg_path = d / "cfg.json"
    tiny_config().save(cfg_path)
    c = ["--config", str(cfg_path)]
    steps = [
        ["synth-gen", *c, "--out", str(d / "data")],
        ["propose", *c, "--scenes", str(d / "data/train"), "--out", str(d / "props.csv")],
        ["extract", *c, "--scenes", str(d / "data/train"), "--proposals", str(d / "props.csv"),
         "--with-gt", "--out", str(d / "train.feat")],
        ["train", *c, "--features", str(d / "train.feat"), "--gt", str(d / "data/train/gt.jsonl"),
         "--out", str(d / "model.rbfx")],
        ["detect", *c, "--scenes", str(d / "data/test"), "--model", str(d / "model.rbfx"), "--out", str(d / "dets.csv")],
        ["eval", *c, "--detections", str(d / "dets.csv"), "--gt", str(d / "data/test/gt.jsonl"),
         "--out", str(d / "curve.csv")],
    ]
    for s in steps:
        assert main(s) == 0, s
    return d, cfg_path


class TestQuickstart:
    def test_outputs_exist(self, run):
        d, _ = run
        for name in ("props.csv", "train.feat", "model.rbfx", "model.rbfx.loss.csv", "dets.csv", "curve.csv", "curve.svg"):
            assert (d / name).stat().st_size > 0
        assert len(list((d / "data/train").glob("*.fmap"))) == 6

    def test_config_echoed(self, run):
        d, cfg_path = run
        want = cfg_path.read_text()
        for name in ("props.csv", "train.feat", "model.rbfx", "dets.csv", "curve.csv"):
            assert (d / f"{name}.config.json").read_text() == want
        assert RunConfig.load(d / "data/config.json") == RunConfig.load(cfg_path)

    def test_proposals(self, run):
        d, _ = run
        props = read_detections(d / "props.csv")
        for boxes, scores in props.values():
            assert len(scores) <= tiny_config().train_top_k
            assert np.all(np.diff(scores) <= 0)

    def test_feature_layout(self, run):
        d, _ = run
        ff, header = read_features(d / "train.feat")
        assert [l[0] for l in ff.layout] == ["conv3", "conv4_atrous"]
        assert ff.features.shape[1] == sum(c * 49 for _, c, _, _ in ff.layout)
        assert ff.is_gt.any() and header["with_gt"]

    def test_model_stages(self, run):
        d, _ = run
        m = load_model((d / "model.rbfx").read_bytes())
        assert [h[1] for h in m.stage_history] == [2, 4, 8]

    def test_loss_log_monotone(self, run):
        d, _ = run
        lines = (d / "model.rbfx.loss.csv").read_text().splitlines()
        assert lines[0] == "stage,tree,log_loss"
        by_stage = {}
        for ln in lines[1:]:
            s, _, v = ln.split(",")
            by_stage.setdefault(s, []).append(float(v))
        assert len(by_stage) == 3
        assert all(loss_is_monotone(v) for v in by_stage.values())

    def test_detect_scores_equal_library_score(self, run):
        d, cfg_path = run
        cfg = RunConfig.load(cfg_path)
        cfg.detect_nms_iou = None
        cfg.save(d / "nonms.json")
        assert main(["detect", "--config", str(d / "nonms.json"), "--scenes", str(d / "data/test"),
                     "--model", str(d / "model.rbfx"), "--out", str(d / "raw.csv")]) == 0
        dets = read_detections(d / "raw.csv")
        forest = load_model((d / "model.rbfx").read_bytes())
        bb = make_backbone(cfg)
        for sc in read_scenes(d / "data/test"):
            props = propose_scene(sc, cfg, cfg.test_top_k)
            X, _ = extract_features(bb, sc.image, props.boxes, cfg.layers)
            want = sorted((score(forest, x, p) for x, p in zip(X, props.scores)), reverse=True)
            boxes, got = dets[sc.image_id]
            assert len(got) <= 100
            np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_rerun_is_byte_identical(self, run, tmp_path):
        d, cfg_path = run
        c = ["--config", str(cfg_path)]
        assert main(["synth-gen", *c, "--out", str(tmp_path / "data"), "--workers", "3"]) == 0
        for p in sorted((d / "data").rglob("*")):
            if p.is_file():
                assert (tmp_path / "data" / p.relative_to(d / "data")).read_bytes() == p.read_bytes()
        assert main(["detect", *c, "--scenes", str(d / "data/test"), "--model", str(d / "model.rbfx"),
                     "--out", str(tmp_path / "dets.csv"), "--workers", "2"]) == 0
        assert (tmp_path / "dets.csv").read_bytes() == (d / "dets.csv").read_bytes()

    def test_eval_prints_summary(self, run, capsys):
        d, cfg_path = run
        assert main(["eval", "--config", str(cfg_path), "--detections", str(d / "dets.csv"),
                     "--gt", str(d / "data/test/gt.jsonl"), "--iou", "0.7", "--out", str(d / "c7.csv")]) == 0
        out = capsys.readouterr().out
        assert "MR-2" in out and "MR-4" in out and "IoU 0.7" in out


class TestEdgeCases:
    def test_zero_scenes(self, tmp_path):
        cfg = tiny_config()
        cfg.synth = replace(cfg.synth, num_train=0, num_test=0)
        cfg.save(tmp_path / "c.json")
        assert main(["synth-gen", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "d")]) == 0
        assert (tmp_path / "d/train/gt.jsonl").read_text() == ""
        assert not list((tmp_path / "d/train").glob("*.fmap"))

    def test_empty_scene_set_detects_header_only(self, tmp_path, run):
        d, cfg_path = run
        (tmp_path / "empty").mkdir()
        assert main(["detect", "--config", str(cfg_path), "--scenes", str(tmp_path / "empty"),
                     "--model", str(d / "model.rbfx"), "--out", str(tmp_path / "o.csv")]) == 0
        assert (tmp_path / "o.csv").read_text() == "image_id,x,y,w,h,score\n"


class TestExitCodes:
    def test_no_command(self):
        with pytest.raises(SystemExit) as e:
            main([])
        assert e.value.code == 1

    def test_missing_required(self):
        with pytest.raises(SystemExit) as e:
            main(["propose", "--out", "x.csv"])
        assert e.value.code == 1

    def test_bad_workers(self, tmp_path):
        with pytest.raises(SystemExit) as e:
            main(["synth-gen", "--out", str(tmp_path), "--workers", "0"])
        assert e.value.code == 1

    def test_bad_iou_is_usage(self, run, tmp_path):
        d, _ = run
        assert main(["eval", "--detections", str(d / "dets.csv"), "--gt", str(d / "data/test/gt.jsonl"),
                     "--iou", "1.5", "--out", str(tmp_path / "c.csv")]) == 1

    def test_missing_file_is_data_error(self, tmp_path):
        assert main(["train", "--features", str(tmp_path / "nope"), "--gt", str(tmp_path / "gt"),
                     "--out", str(tmp_path / "m")]) == 2

    def test_bad_config_is_data_error(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"bogus": 1}))
        assert main(["synth-gen", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "d")]) == 2

    def test_corrupt_model_is_data_error(self, run, tmp_path):
        d, cfg_path = run
        (tmp_path / "m.rbfx").write_bytes((d / "model.rbfx").read_bytes()[:-3])
        assert main(["detect", "--config", str(cfg_path), "--scenes", str(d / "data/test"),
                     "--model", str(tmp_path / "m.rbfx"), "--out", str(tmp_path / "o.csv")]) == 2

    def test_bad_detections_is_data_error(self, run, tmp_path):
        d, _ = run
        (tmp_path / "dets.csv").write_text("image_id,x,y,w,h,score\ntest_00000,1,2,3\n")
        assert main(["eval", "--detections", str(tmp_path / "dets.csv"), "--gt", str(d / "data/test/gt.jsonl"),
                     "--out", str(tmp_path / "c.csv")]) == 2
