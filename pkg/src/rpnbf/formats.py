"""On-disk codecs used by the command line.

* detections / proposals CSV: ``image_id,x,y,w,h,score``
* ground truth JSON lines: ``{image_id, x, y, w, h, height, visibility}``
* distractor JSON lines: ``{image_id, x, y, w, h}``
* feature matrix ``FEAT``: magic, version, JSON header, per-row metadata
  and little-endian float32 features

Floats are written with ``repr`` so every value round-trips exactly and the
same data always produces the same bytes.
"""
from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from rpnbf.evaluation import GroundTruthBox
from rpnbf.geometry import Box
from rpnbf.synth import Scene
from rpnbf.tensors import FeatureMap, load_fmap, save_fmap

DET_HEADER = ["image_id", "x", "y", "w", "h", "score"]
FEAT_MAGIC = b"FEAT"
FEAT_VERSION = 1
GT_FILE = "gt.jsonl"
DISTRACTOR_FILE = "distractors.jsonl"


def _num(v) -> str:
    return repr(float(v))


# -- detections ---------------------------------------------------------------

def write_detections(path, rows: dict) -> None:
    """``rows`` maps image id to ``(boxes, scores)``; images are written in key order."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DET_HEADER)
        for image_id in sorted(rows):
            boxes, scores = rows[image_id]
            for b, s in zip(np.asarray(boxes).reshape(-1, 4), np.asarray(scores).reshape(-1)):
                w.writerow([image_id, *map(_num, b), _num(s)])


def read_detections(path) -> dict:
    out: dict = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != DET_HEADER:
            raise ValueError(f"{path}: expected header {','.join(DET_HEADER)}")
        for n, row in enumerate(reader, start=2):
            if len(row) != 6:
                raise ValueError(f"{path}:{n}: expected 6 fields, got {len(row)}")
            try:
                vals = [float(v) for v in row[1:]]
            except ValueError as e:
                raise ValueError(f"{path}:{n}: {e}") from None
            if not np.all(np.isfinite(vals)):
                raise ValueError(f"{path}:{n}: non-finite value")
            out.setdefault(row[0], []).append(vals)
    return {
        k: (np.array(v, dtype=np.float64)[:, :4], np.array(v, dtype=np.float64)[:, 4])
        for k, v in out.items()
    }


# -- annotations --------------------------------------------------------------

def _read_jsonl(path, keys) -> list[dict]:
    recs = []
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{n}: {e}") from None
            missing = [k for k in keys if k not in rec]
            if missing:
                raise ValueError(f"{path}:{n}: missing {missing}")
            recs.append(rec)
    return recs


def _dump(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def write_gt(path, gts_by_image: dict) -> None:
    with open(path, "w") as fh:
        for image_id in sorted(gts_by_image):
            for g in gts_by_image[image_id]:
                x, y, w, h = map(float, g.box.as_tuple())
                fh.write(_dump({"image_id": image_id, "x": x, "y": y, "w": w, "h": h,
                                "height": float(g.height), "visibility": float(g.visibility)}) + "\n")


def read_gt(path) -> dict:
    out: dict = {}
    for r in _read_jsonl(path, ("image_id", "x", "y", "w", "h", "height", "visibility")):
        g = GroundTruthBox(Box(r["x"], r["y"], r["w"], r["h"]), float(r["height"]), float(r["visibility"]))
        out.setdefault(r["image_id"], []).append(g)
    return out


def write_distractors(path, boxes_by_image: dict) -> None:
    with open(path, "w") as fh:
        for image_id in sorted(boxes_by_image):
            for b in boxes_by_image[image_id]:
                x, y, w, h = map(float, b.as_tuple())
                fh.write(_dump({"image_id": image_id, "x": x, "y": y, "w": w, "h": h}) + "\n")


def read_distractors(path) -> dict:
    out: dict = {}
    for r in _read_jsonl(path, ("image_id", "x", "y", "w", "h")):
        out.setdefault(r["image_id"], []).append(Box(r["x"], r["y"], r["w"], r["h"]))
    return out


# -- scene directories --------------------------------------------------------

def write_scenes(out_dir, scenes: list[Scene]) -> None:
    """One ``<image_id>.fmap`` per scene plus the gt and distractor files."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    for sc in scenes:
        save_fmap(FeatureMap(sc.image[None], 1.0), d / f"{sc.image_id}.fmap")
    write_gt(d / GT_FILE, {sc.image_id: sc.gts for sc in scenes})
    write_distractors(d / DISTRACTOR_FILE, {sc.image_id: sc.distractors for sc in scenes})


def read_scenes(scene_dir) -> list[Scene]:
    """Scenes of a directory written by :func:`write_scenes`, sorted by id."""
    d = Path(scene_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"scene directory {d} does not exist")
    gts = read_gt(d / GT_FILE) if (d / GT_FILE).exists() else {}
    dis = read_distractors(d / DISTRACTOR_FILE) if (d / DISTRACTOR_FILE).exists() else {}
    scenes = []
    for p in sorted(d.glob("*.fmap")):
        fm = load_fmap(p)
        if fm.channels != 1:
            raise ValueError(f"{p}: scene images have one channel, found {fm.channels}")
        image_id = p.stem
        scenes.append(Scene(fm.data[0], gts.get(image_id, []), dis.get(image_id, []), image_id))
    unknown = (set(gts) | set(dis)) - {s.image_id for s in scenes}
    if unknown:
        raise ValueError(f"annotations for missing images: {sorted(unknown)[:5]}")
    return scenes


# -- feature matrices ---------------------------------------------------------

@dataclass
class FeatureFile:
    """Feature rows with the proposal each came from."""

    image_ids: list  # per row
    boxes: np.ndarray  # (n, 4) float64
    scores: np.ndarray  # (n,) proposal score, the prior of the row
    is_gt: np.ndarray  # (n,) bool, row is an added ground-truth box
    features: np.ndarray  # (n, d) float32
    layout: list  # [(layer, channels, out, out), ...]

    def __len__(self):
        return int(self.scores.shape[0])


def feature_bytes(ff: FeatureFile, extra: dict | None = None) -> bytes:
    names = sorted(set(ff.image_ids))
    index = {k: i for i, k in enumerate(names)}
    n, d = ff.features.shape if ff.features.ndim == 2 else (0, 0)
    header = {"images": names, "layout": [list(l) for l in ff.layout], "rows": n, "cols": d, **(extra or {})}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(FEAT_MAGIC)
    buf.write(struct.pack("<II", FEAT_VERSION, len(hb)))
    buf.write(hb)
    buf.write(np.array([index[k] for k in ff.image_ids], dtype="<u4").tobytes())
    buf.write(np.asarray(ff.boxes, dtype="<f8").reshape(n, 4).tobytes())
    buf.write(np.asarray(ff.scores, dtype="<f8").tobytes())
    buf.write(np.asarray(ff.is_gt, dtype=np.uint8).tobytes())
    buf.write(np.asarray(ff.features, dtype="<f4").reshape(n, d).tobytes())
    return buf.getvalue()


def parse_features(raw: bytes) -> tuple[FeatureFile, dict]:
    if len(raw) < 12 or raw[:4] != FEAT_MAGIC:
        raise ValueError("not a FEAT feature file")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != FEAT_VERSION:
        raise ValueError(f"unsupported feature file version {version}")
    try:
        header = json.loads(raw[12:12 + hlen])
    except json.JSONDecodeError as e:
        raise ValueError(f"corrupt feature file header: {e}") from None
    n, d = header["rows"], header["cols"]
    pos = 12 + hlen
    need = pos + n * (4 + 32 + 8 + 1 + 4 * d)
    if len(raw) != need:
        raise ValueError(f"feature file has {len(raw)} bytes, expected {need}")
    idx = np.frombuffer(raw, "<u4", n, pos)
    pos += 4 * n
    boxes = np.frombuffer(raw, "<f8", 4 * n, pos).reshape(n, 4).copy()
    pos += 32 * n
    scores = np.frombuffer(raw, "<f8", n, pos).copy()
    pos += 8 * n
    is_gt = np.frombuffer(raw, np.uint8, n, pos).astype(bool)
    pos += n
    feats = np.frombuffer(raw, "<f4", n * d, pos).reshape(n, d).astype(np.float32)
    names = header["images"]
    if n and int(idx.max()) >= len(names):
        raise ValueError("feature file references an unknown image")
    ff = FeatureFile([names[i] for i in idx], boxes, scores, is_gt, feats,
                     [tuple(l) for l in header["layout"]])
    return ff, header


def write_features(path, ff: FeatureFile, extra: dict | None = None) -> None:
    Path(path).write_bytes(feature_bytes(ff, extra))


def read_features(path) -> tuple[FeatureFile, dict]:
    return parse_features(Path(path).read_bytes())
