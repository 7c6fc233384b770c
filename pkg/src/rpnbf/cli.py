"""``rpnbf`` command line: synthetic data to miss-rate curve in six steps.

Every subcommand takes ``--config`` (a run-config JSON; defaults when
omitted) and writes the resolved config next to its output as
``<output>.config.json`` (``config.json`` inside directory outputs).

Exit codes: 0 success, 1 usage error, 2 data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from functools import partial
from pathlib import Path

import numpy as np

from rpnbf import __version__
from rpnbf.config import RunConfig
from rpnbf.evaluation import evaluate, export_curve, filter_reasonable
from rpnbf.forest import load_model, save_model
from rpnbf.formats import (
    FeatureFile,
    read_detections,
    read_features,
    read_gt,
    read_scenes,
    write_detections,
    write_features,
    write_scenes,
)
from rpnbf.geometry import nms_indices
from rpnbf.pipeline import (
    ImageRows,
    extract_features,
    gt_priors,
    make_backbone,
    make_scene,
    map_ordered,
    propose_scene,
    train_from_rows,
)
from rpnbf.proposals import ProposalArrays

log = logging.getLogger("rpnbf")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_config(path) -> RunConfig:
    return RunConfig() if path is None else RunConfig.load(path)


def _echo_config(cfg: RunConfig, out: Path) -> None:
    target = out / "config.json" if out.is_dir() else out.with_name(out.name + ".config.json")
    cfg.save(target)


def _scenes(path):
    scenes = read_scenes(path)
    log.info("%d scenes from %s", len(scenes), path)
    return scenes


# -- subcommands --------------------------------------------------------------

def cmd_synth_gen(args, cfg: RunConfig) -> None:
    out = Path(args.out)
    for split, n in (("train", cfg.synth.num_train), ("test", cfg.synth.num_test)):
        scenes = map_ordered(partial(make_scene, cfg, split), range(n), args.workers)
        write_scenes(out / split, scenes)
        log.info("%s: %d scenes", split, n)
    _echo_config(cfg, out)


def _propose(sc, cfg, top_k):
    return propose_scene(sc, cfg, top_k)


def cmd_propose(args, cfg: RunConfig) -> None:
    top_k = cfg.train_top_k if args.top_k is None else args.top_k
    if top_k < 1:
        raise UsageError("--top-k must be >= 1")
    scenes = _scenes(args.scenes)
    props = map_ordered(partial(_propose, cfg=cfg, top_k=top_k), scenes, args.workers)
    out = Path(args.out)
    write_detections(out, {sc.image_id: (p.boxes, p.scores) for sc, p in zip(scenes, props)})
    _echo_config(cfg, out)


def _extract_one(item, bb, cfg, with_gt):
    sc, (boxes, scores) = item
    is_gt = np.zeros(boxes.shape[0], dtype=bool)
    if with_gt and sc.gts:
        g = sc.gt_array()
        props = ProposalArrays(boxes, scores, np.arange(boxes.shape[0]))
        boxes = np.concatenate([boxes, g])
        scores = np.concatenate([scores, gt_priors(g, props, cfg.label_iou)])
        is_gt = np.concatenate([is_gt, np.ones(g.shape[0], dtype=bool)])
    X, layout = extract_features(bb, sc.image, boxes, cfg.layers)
    return ImageRows(sc.image_id, boxes, scores, is_gt, X), layout


def cmd_extract(args, cfg: RunConfig) -> None:
    scenes = _scenes(args.scenes)
    props = read_detections(args.proposals)
    unknown = set(props) - {s.image_id for s in scenes}
    if unknown:
        raise ValueError(f"proposals for images not in {args.scenes}: {sorted(unknown)[:5]}")
    empty = (np.zeros((0, 4)), np.zeros(0))
    items = [(sc, props.get(sc.image_id, empty)) for sc in scenes]
    bb = make_backbone(cfg)
    done = map_ordered(partial(_extract_one, bb=bb, cfg=cfg, with_gt=args.with_gt), items, args.workers)
    rows = [r for r, _ in done]
    layout = done[0][1] if done else []
    d = rows[0].features.shape[1] if rows else 0
    ff = FeatureFile(
        [r.image_id for r in rows for _ in range(len(r.scores))],
        np.concatenate([r.boxes for r in rows]) if rows else np.zeros((0, 4)),
        np.concatenate([r.scores for r in rows]) if rows else np.zeros(0),
        np.concatenate([r.is_gt for r in rows]) if rows else np.zeros(0, dtype=bool),
        np.concatenate([r.features for r in rows]) if rows else np.zeros((0, d), dtype=np.float32),
        layout,
    )
    out = Path(args.out)
    write_features(out, ff, {"layers": list(cfg.layers), "with_gt": bool(args.with_gt)})
    _echo_config(cfg, out)


def _rows_by_image(ff: FeatureFile) -> list[ImageRows]:
    ids = np.asarray(ff.image_ids, dtype=object)
    rows = []
    for image_id in sorted(set(ff.image_ids)):
        m = ids == image_id
        rows.append(ImageRows(image_id, ff.boxes[m], ff.scores[m], ff.is_gt[m], ff.features[m]))
    return rows


def cmd_train(args, cfg: RunConfig) -> None:
    ff, _ = read_features(args.features)
    gts = read_gt(args.gt)
    rows = _rows_by_image(ff)
    if not rows:
        raise ValueError("feature file has no rows")
    gt_boxes = [np.array([g.box.as_tuple() for g in gts.get(r.image_id, [])], dtype=np.float64).reshape(-1, 4)
                for r in rows]
    forest = train_from_rows(rows, gt_boxes, cfg, log=log.info)
    out = Path(args.out)
    out.write_bytes(save_model(forest))
    loss_path = Path(args.loss_log) if args.loss_log else out.with_name(out.name + ".loss.csv")
    with open(loss_path, "w") as fh:
        fh.write("stage,tree,log_loss\n")
        for stage, hist in enumerate(forest.stage_losses, start=1):
            for t, v in enumerate(hist):
                fh.write(f"{stage},{t},{float(v)!r}\n")
    _echo_config(cfg, out)


def _detect_one(sc, forest, bb, cfg):
    props = propose_scene(sc, cfg, cfg.test_top_k)
    X, _ = extract_features(bb, sc.image, props.boxes, cfg.layers)
    s = forest.score_many(X, props.scores)
    boxes = props.boxes
    if cfg.detect_nms_iou is not None:
        keep = nms_indices(boxes, s, cfg.detect_nms_iou)
    else:
        keep = np.argsort(-s, kind="stable")
    return boxes[keep], s[keep]


def cmd_detect(args, cfg: RunConfig) -> None:
    forest = load_model(Path(args.model).read_bytes())
    scenes = _scenes(args.scenes)
    bb = make_backbone(cfg)
    dets = map_ordered(partial(_detect_one, forest=forest, bb=bb, cfg=cfg), scenes, args.workers)
    out = Path(args.out)
    write_detections(out, {sc.image_id: d for sc, d in zip(scenes, dets)})
    _echo_config(cfg, out)


def cmd_eval(args, cfg: RunConfig) -> None:
    iou = cfg.eval.iou_thresh if args.iou is None else args.iou
    if not 0 < iou <= 1:
        raise UsageError("--iou must be in (0, 1]")
    gts = read_gt(args.gt)
    ids = set(gts)
    if args.scenes:
        ids |= {p.stem for p in Path(args.scenes).glob("*.fmap")}
    table = {}
    for image_id in sorted(ids):
        kept = filter_reasonable(gts.get(image_id, []), cfg.eval.min_height, cfg.eval.min_visibility)
        boxes = np.array([g.box.as_tuple() for g in kept], dtype=np.float64).reshape(-1, 4)
        table[image_id] = (boxes, np.array([g.ignore for g in kept], dtype=bool))
    dets = read_detections(args.detections)
    c = evaluate(dets, table, iou)
    out = Path(args.out)
    svg = Path(args.svg) if args.svg else out.with_suffix(".svg")
    export_curve(c, out, svg, label=args.label)
    _echo_config(cfg, out)
    print(f"MR-2 {c.mr2:.6f}  MR-4 {c.mr4:.6f}  (IoU {iou}, {len(table)} images)")


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rpnbf", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"rpnbf {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="run-config JSON (defaults when omitted)")
        s.add_argument("--out", required=True, help="output path")
        s.set_defaults(fn=fn)
        return s

    def workers(s):
        s.add_argument("--workers", type=int, default=1, help="threads; never changes outputs")

    s = add("synth-gen", cmd_synth_gen, "render the train/test scene corpus")
    workers(s)
    s = add("propose", cmd_propose, "oracle proposals for every scene")
    s.add_argument("--scenes", required=True)
    s.add_argument("--top-k", type=int, help="proposals per image (default: train_top_k)")
    workers(s)
    s = add("extract", cmd_extract, "RoI features for proposals")
    s.add_argument("--scenes", required=True)
    s.add_argument("--proposals", required=True)
    s.add_argument("--with-gt", action="store_true", help="append ground-truth boxes as extra rows")
    workers(s)
    s = add("train", cmd_train, "train the bootstrapped forest")
    s.add_argument("--features", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--loss-log", help="loss CSV (default: <out>.loss.csv)")
    s = add("detect", cmd_detect, "propose, extract and score test scenes")
    s.add_argument("--scenes", required=True)
    s.add_argument("--model", required=True)
    workers(s)
    s = add("eval", cmd_eval, "miss rate vs FPPI curve and log-average miss rates")
    s.add_argument("--detections", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--scenes", help="scene directory; its images count toward FPPI even without ground truth")
    s.add_argument("--iou", type=float, help="match threshold (default: eval.iou_thresh)")
    s.add_argument("--svg", help="plot path (default: <out> with .svg)")
    s.add_argument("--label", default="RPN+BF")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    if getattr(args, "workers", 1) < 1:
        parser.error("--workers must be >= 1")
    try:
        cfg = _load_config(args.config)
        args.fn(args, cfg)
    except UsageError as e:
        print(f"rpnbf: error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError, TypeError, RuntimeError, json.JSONDecodeError) as e:
        print(f"rpnbf: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
