"""Run configuration: one JSON document per experiment.

Defaults follow the Caltech setting; the ``synth`` section controls the
synthetic corpus that replaces real data.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from rpnbf.forest import CascadeConfig
from rpnbf.geometry import AnchorConfig


@dataclass
class EvalConfig:
    iou_thresh: float = 0.5
    min_height: float = 50.0
    min_visibility: float = 0.65
    fppi_ranges: list = field(default_factory=lambda: [[1e-2, 1.0], [1e-4, 1.0]])


@dataclass
class SynthConfig:
    seed: int = 0
    num_train: int = 200
    num_test: int = 100
    size: list = field(default_factory=lambda: [320, 240])
    peds: list = field(default_factory=lambda: [1, 4])  # inclusive range per scene
    distractors: list = field(default_factory=lambda: [1, 4])
    height_range: list = field(default_factory=lambda: [40.0, 200.0])
    occlusion_prob: float = 0.15
    noise_sigma: float = 0.15
    backbone_seed: int = 0
    channels: list = field(default_factory=lambda: [6, 8, 12, 16])  # stem, conv3, conv4, conv5


@dataclass
class RunConfig:
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    short_edge: int = 720
    nms_iou: float = 0.7
    train_top_k: int = 1000
    test_top_k: int = 100
    detect_nms_iou: float | None = None  # optional NMS on classifier-scored detections
    layers: list = field(default_factory=lambda: ["conv3", "conv4_atrous"])
    label_iou: float = 0.5
    include_gt: bool = True
    forest: CascadeConfig = field(default_factory=CascadeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["forest"] = self.forest.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        kw = dict(d)
        if "anchors" in kw:
            kw["anchors"] = AnchorConfig(**kw["anchors"])
        if "forest" in kw:
            kw["forest"] = CascadeConfig.from_dict(kw["forest"])
        if "eval" in kw:
            kw["eval"] = EvalConfig(**kw["eval"])
        if "synth" in kw:
            kw["synth"] = SynthConfig(**kw["synth"])
        return cls(**kw)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())
