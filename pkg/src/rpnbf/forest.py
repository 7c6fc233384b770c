"""Cascaded RealBoost forest with hard-negative bootstrapping.

Trees are trained on 256-bin quantised features but store raw float32
thresholds, so inference never needs the quantisation table.  A split sends
``x[feature] < threshold`` to the left child.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from rpnbf import kernels

MODEL_MAGIC = b"RBFX"
MODEL_VERSION = 1
NUM_BINS = 256
STAGE_TREES = (64, 128, 256, 512, 1024, 1536)
FINAL_TREES = 2048


def f0_from_score(s, eps: float = 1e-6):
    """RealBoost margin of a proposal score: ``0.5 * ln(s / (1 - s))``.

    ``s`` is clamped to ``[eps, 1 - eps]`` first.  Works on scalars and arrays.
    """
    s = np.clip(np.asarray(s, dtype=np.float64), eps, 1.0 - eps)
    out = 0.5 * np.log(s / (1.0 - s))
    return float(out) if out.ndim == 0 else out


@dataclass
class Tree:
    """Flat preorder tree.  Leaves have ``feature == -1``."""

    feature: np.ndarray  # int32
    threshold: np.ndarray  # float32
    left: np.ndarray  # int32, local node index or -1
    right: np.ndarray  # int32
    value: np.ndarray  # float32, leaf confidences

    def __len__(self):
        return int(self.feature.shape[0])

    @property
    def depth(self) -> int:
        def rec(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(rec(self.left[i]), rec(self.right[i]))

        return rec(0)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float32)
        return kernels.backend.forest_predict(
            X, self.feature, self.threshold, self.left, self.right, self.value, np.zeros(1, dtype=np.int64)
        )

    def to_nested(self, i: int = 0):
        """Nested ``(feature, threshold, left, right)`` / ``value`` tuples."""
        if self.feature[i] < 0:
            return float(self.value[i])
        return (int(self.feature[i]), float(self.threshold[i]),
                self.to_nested(int(self.left[i])), self.to_nested(int(self.right[i])))


@dataclass
class Forest:
    trees: list = field(default_factory=list)
    uses_prior: bool = True
    clamp_eps: float = 1e-6
    n_features: int | None = None
    stage_history: list = field(default_factory=list)  # (stage, trees, hard negatives added)
    config: dict = field(default_factory=dict)
    loss_history: list = field(default_factory=list)  # log exponential loss, before each tree and after the last
    truncated: bool = False
    stage_losses: list = field(default_factory=list, repr=False)
    margins: np.ndarray | None = field(default=None, repr=False, compare=False)

    _packed: tuple | None = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.trees)

    def packed(self):
        if self._packed is None or self._packed[0] != len(self.trees):
            sizes = [len(t) for t in self.trees]
            offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64) if sizes else np.zeros(0, np.int64)
            if sizes:
                feature = np.concatenate([t.feature for t in self.trees]).astype(np.int32)
                threshold = np.concatenate([t.threshold for t in self.trees]).astype(np.float32)
                left = np.concatenate([np.where(t.left >= 0, t.left + o, -1) for t, o in zip(self.trees, offsets)])
                right = np.concatenate([np.where(t.right >= 0, t.right + o, -1) for t, o in zip(self.trees, offsets)])
                value = np.concatenate([t.value for t in self.trees]).astype(np.float32)
            else:
                feature = np.zeros(0, np.int32)
                threshold = value = np.zeros(0, np.float32)
                left = right = np.zeros(0, np.int32)
            arrays = (feature, threshold, left.astype(np.int32), right.astype(np.int32), value, offsets)
            self._packed = (len(self.trees), arrays)
        return self._packed[1]

    def tree_sum(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float32)
        if X.ndim != 2:
            raise ValueError("expected a 2-D feature matrix")
        if self.n_features is not None and X.shape[1] != self.n_features:
            raise ValueError(f"feature length {X.shape[1]} != model's {self.n_features}")
        if not self.trees:
            return np.zeros(X.shape[0], dtype=np.float64)
        return kernels.backend.forest_predict(X, *self.packed())

    def score_many(self, X: np.ndarray, priors=None) -> np.ndarray:
        total = self.tree_sum(X)
        if self.uses_prior:
            if priors is None:
                priors = np.full(total.shape[0], 0.5)
            total = np.asarray(f0_from_score(np.asarray(priors, dtype=np.float64).reshape(-1), self.clamp_eps)) + total
        return total


def score(forest: Forest, x, prior: float = 0.5) -> float:
    """Prior margin plus the sum of leaf confidences for one feature vector."""
    values = getattr(x, "values", x)
    X = np.asarray(values, dtype=np.float32).reshape(1, -1)
    return float(forest.score_many(X, [prior])[0])


@dataclass
class QuantTable:
    """Per-feature linear 256-bin quantisation between the column min and max."""

    edges: np.ndarray  # (d, 255) float32, non-decreasing per row

    @classmethod
    def fit(cls, X: np.ndarray) -> "QuantTable":
        X = np.asarray(X, dtype=np.float32)
        lo = X.min(axis=0).astype(np.float64)
        hi = X.max(axis=0).astype(np.float64)
        frac = np.arange(1, NUM_BINS, dtype=np.float64) / NUM_BINS
        edges = (lo[:, None] + (hi - lo)[:, None] * frac[None, :]).astype(np.float32)
        return cls(np.maximum.accumulate(edges, axis=1))

    @property
    def n_features(self) -> int:
        return self.edges.shape[0]

    def transform(self, X: np.ndarray) -> np.ndarray:
        """Bin indices as a ``(d, n)`` uint8 array; bin = number of edges <= x."""
        X = np.asarray(X, dtype=np.float32)
        out = np.empty((X.shape[1], X.shape[0]), dtype=np.uint8)
        for f in range(X.shape[1]):
            out[f] = np.searchsorted(self.edges[f], X[:, f], side="right")
        return out


@dataclass
class TrainSet:
    features: np.ndarray  # (n, d) float32
    labels: np.ndarray  # +1 / -1
    prior_scores: np.ndarray  # proposal score s per row
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels).astype(np.int8).reshape(-1)
        self.prior_scores = np.asarray(self.prior_scores, dtype=np.float64).reshape(-1)
        n = self.features.shape[0]
        if self.labels.shape[0] != n or self.prior_scores.shape[0] != n:
            raise ValueError("features, labels and prior scores differ in length")
        if not np.all(np.isin(self.labels, (-1, 1))):
            raise ValueError("labels must be +1 or -1")
        if self.weights is None:
            self.weights = np.full(n, 1.0 / max(n, 1))
        else:
            w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if w.shape[0] != n or np.any(w <= 0):
                raise ValueError("weights must be positive, one per row")
            self.weights = w / w.sum()

    def __len__(self):
        return int(self.labels.shape[0])


def _leaf_value(wp: float, wn: float, eps: float) -> np.float32:
    return np.float32(0.5 * math.log((wp + eps) / (wn + eps)))


def _best_split(hist: np.ndarray):
    """Best (feature position, bin) for ``(F, 2, 256)`` class histograms.

    Minimises ``2 * (sqrt(L+ L-) + sqrt(R+ R-))`` over splits ``bin < b``
    with both children non-empty.  Returns ``None`` when no split exists.
    """
    left = np.cumsum(hist, axis=2)[:, :, :-1]
    right = np.cumsum(hist[:, :, ::-1], axis=2)[:, :, ::-1][:, :, 1:]
    z = 2.0 * (np.sqrt(left[:, 0] * left[:, 1]) + np.sqrt(right[:, 0] * right[:, 1]))
    occupied = (hist[:, 0] + hist[:, 1]) > 0
    any_left = np.cumsum(occupied, axis=1)[:, :-1] > 0
    any_right = np.cumsum(occupied[:, ::-1], axis=1)[:, ::-1][:, 1:] > 0
    valid = any_left & any_right
    if not valid.any():
        return None
    z = np.where(valid, z, np.inf)
    flat = int(np.argmin(z))
    k, b = divmod(flat, NUM_BINS - 1)
    return k, b + 1


def _grow(xq_t, w, pos, edges, depth, n_sub, rng, eps):
    """Grow one tree; returns the tree and the ``(rows, value)`` of each leaf."""
    d = xq_t.shape[0]
    feature, threshold, left, right, value = [], [], [], [], []
    leaves = []
    backend = kernels.backend

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    def build(idx, level):
        node = new_node()
        wi = w[idx]
        pi = pos[idx].astype(bool)
        wp = float(wi[pi].sum())
        wn = float(wi[~pi].sum())
        split = None
        if level < depth and wp > 0 and wn > 0:
            if n_sub >= d:
                feats = np.arange(d, dtype=np.int64)
            else:
                feats = np.sort(rng.choice(d, n_sub, replace=False)).astype(np.int64)
            hist = backend.histograms(xq_t, idx, feats, w, pos)
            found = _best_split(hist)
            if found is not None:
                split = (int(feats[found[0]]), found[1])
        if split is None:
            v = _leaf_value(wp, wn, eps)
            value[node] = v
            leaves.append((idx, v))
            return node
        f, b = split
        go_left = xq_t[f, idx] < b
        feature[node] = f
        threshold[node] = edges[f, b - 1]
        left[node] = build(idx[go_left], level + 1)
        right[node] = build(idx[~go_left], level + 1)
        return node

    build(np.arange(xq_t.shape[1], dtype=np.int64), 0)
    tree = Tree(
        np.asarray(feature, dtype=np.int32),
        np.asarray(threshold, dtype=np.float32),
        np.asarray(left, dtype=np.int32),
        np.asarray(right, dtype=np.int32),
        np.asarray(value, dtype=np.float32),
    )
    return tree, leaves


def _n_sub(d: int, feature_fraction: float) -> int:
    if feature_fraction >= 1.0:
        return d
    return max(1, min(d, int(round(d * feature_fraction))))


def train_tree(ts: TrainSet, qt: QuantTable, depth: int, feature_fraction: float = 1.0,
               rng_seed: int = 0, xq_t: np.ndarray | None = None) -> Tree:
    """Greedy RealBoost tree on the current (normalised) weights of ``ts``.

    A single-class set yields one leaf with a smoothed, clamped value.
    """
    if xq_t is None:
        xq_t = qt.transform(ts.features)
    w = ts.weights / ts.weights.sum()
    pos = np.ascontiguousarray(ts.labels > 0, dtype=np.uint8)
    rng = np.random.default_rng(rng_seed)
    tree, _ = _grow(np.ascontiguousarray(xq_t), w, pos, qt.edges, depth,
                    _n_sub(ts.features.shape[1], feature_fraction), rng, 1e-6)
    return tree


def _logsumexp(z: np.ndarray) -> float:
    m = float(z.max())
    return m + math.log(float(np.exp(z - m).sum()))


def boost(ts: TrainSet, num_trees: int, depth: int, rng_seed: int = 0, *, feature_fraction: float = 1.0,
          uses_prior: bool = True, clamp_eps: float = 1e-6, qt: QuantTable | None = None) -> Forest:
    """RealBoost: reweight by ``exp(-y F)``, fit a tree, add it to ``F``.

    ``F`` starts at the prior margin of each row when ``uses_prior`` is set.
    ``loss_history`` records ``log sum exp(-y F)`` before every tree and after
    the last one and is checked after every tree; an increase raises
    ``ArithmeticError``.  Training stops early if one example holds all the
    weight.
    """
    if num_trees < 0:
        raise ValueError("num_trees must be >= 0")
    n, d = ts.features.shape
    if n == 0:
        raise ValueError("empty training set")
    qt = qt or QuantTable.fit(ts.features)
    xq_t = np.ascontiguousarray(qt.transform(ts.features))
    y = ts.labels.astype(np.float64)
    pos = np.ascontiguousarray(ts.labels > 0, dtype=np.uint8)
    F = f0_from_score(ts.prior_scores, clamp_eps) if uses_prior else np.zeros(n)
    F = np.array(F, dtype=np.float64).reshape(n)
    rng = np.random.default_rng(rng_seed)
    n_sub = _n_sub(d, feature_fraction)

    forest = Forest(uses_prior=uses_prior, clamp_eps=clamp_eps, n_features=d)
    forest.config = {"depth": depth, "num_trees": num_trees, "seed": rng_seed, "feature_fraction": feature_fraction}
    for _ in range(num_trees):
        z = -y * F
        log_loss = _logsumexp(z)
        forest.loss_history.append(log_loss)
        if not loss_is_monotone(forest.loss_history[-2:]):
            raise ArithmeticError(f"exponential loss rose from {forest.loss_history[-2]!r} to {log_loss!r}")
        w = np.exp(z - log_loss)
        w /= w.sum()
        if w.max() >= 1.0 - 1e-12:
            forest.truncated = True
            break
        tree, leaves = _grow(xq_t, w, pos, qt.edges, depth, n_sub, rng, 1e-6)
        for idx, v in leaves:
            F[idx] += float(v)
        forest.trees.append(tree)
    else:
        forest.loss_history.append(_logsumexp(-y * F))
        if not loss_is_monotone(forest.loss_history[-2:]):
            raise ArithmeticError("exponential loss rose on the last tree")
    forest.margins = F
    return forest


def loss_is_monotone(loss_history: Sequence[float], rtol: float = 1e-12) -> bool:
    """True if the log exponential loss never increases beyond rounding."""
    h = np.asarray(loss_history, dtype=np.float64)
    if h.size < 2:
        return True
    slack = rtol * np.maximum(1.0, np.abs(h[:-1]))
    return bool(np.all(h[1:] <= h[:-1] + slack))


def mine_hard_negatives(forest: Forest, features: np.ndarray, priors, quota: int, used=None) -> np.ndarray:
    """Indices of the ``quota`` highest-scoring unused pool negatives.

    Ties go to the lower pool index.
    """
    features = np.asarray(features, dtype=np.float32)
    n = features.shape[0]
    if n == 0 or quota <= 0:
        return np.zeros(0, dtype=np.int64)
    cand = np.arange(n) if used is None else np.flatnonzero(~np.asarray(used, dtype=bool))
    if cand.size == 0:
        return np.zeros(0, dtype=np.int64)
    s = forest.score_many(features[cand], np.asarray(priors, dtype=np.float64)[cand])
    order = np.argsort(-s, kind="stable")[:quota]
    return cand[order].astype(np.int64)


@dataclass
class CascadeConfig:
    stage_trees: tuple = STAGE_TREES
    final_trees: int = FINAL_TREES
    depth: int = 5
    feature_fraction: float = 1.0 / 16.0
    hard_negative_fraction: float = 0.1
    seed: int = 0
    uses_prior: bool = True
    clamp_eps: float = 1e-6

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_trees"] = list(self.stage_trees)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CascadeConfig":
        d = dict(d)
        if "stage_trees" in d:
            d["stage_trees"] = tuple(d["stage_trees"])
        return cls(**d)


def stage_seed(seed: int, stage: int) -> int:
    """Seed of the boosting run at ``stage`` (1-based; the final forest is last)."""
    return int(np.random.SeedSequence([seed, stage]).generate_state(1)[0])


def train_cascade(pos_features: np.ndarray, neg_features: np.ndarray, cfg: CascadeConfig | None = None,
                  pos_priors=None, neg_priors=None, log=None) -> Forest:
    """Bootstrapped training: fresh forests per stage, hard negatives mined between.

    The initial set is every positive plus as many seeded-random pool
    negatives.  After each stage the ``ceil(fraction * n_pos)`` top-scoring
    unused negatives join the set.  The returned forest is the final one,
    trained on the accumulated set; its ``stage_history`` lists
    ``(stage, trees, negatives added)`` for every stage.
    """
    cfg = cfg or CascadeConfig()
    pos_features = np.asarray(pos_features, dtype=np.float32)
    neg_features = np.asarray(neg_features, dtype=np.float32)
    n_pos, n_neg = pos_features.shape[0], neg_features.shape[0]
    if n_pos == 0:
        raise ValueError("no positive examples")
    pos_priors = np.full(n_pos, 0.5) if pos_priors is None else np.asarray(pos_priors, dtype=np.float64)
    neg_priors = np.full(n_neg, 0.5) if neg_priors is None else np.asarray(neg_priors, dtype=np.float64)

    rng = np.random.default_rng(cfg.seed)
    used = np.zeros(n_neg, dtype=bool)
    n_init = min(n_pos, n_neg)
    used[rng.choice(n_neg, n_init, replace=False)] = True
    shortfall = n_pos - n_init
    quota = int(math.ceil(cfg.hard_negative_fraction * n_pos))
    history = []
    losses = []

    def fit(num_trees, stage):
        neg_idx = np.flatnonzero(used)
        ts = TrainSet(
            np.concatenate([pos_features, neg_features[neg_idx]]),
            np.concatenate([np.ones(n_pos, np.int8), -np.ones(neg_idx.size, np.int8)]),
            np.concatenate([pos_priors, neg_priors[neg_idx]]),
        )
        return boost(ts, num_trees, cfg.depth, stage_seed(cfg.seed, stage),
                     feature_fraction=cfg.feature_fraction, uses_prior=cfg.uses_prior, clamp_eps=cfg.clamp_eps)

    for k, num_trees in enumerate(cfg.stage_trees, start=1):
        forest = fit(num_trees, k)
        losses.append(forest.loss_history)
        mined = mine_hard_negatives(forest, neg_features, neg_priors, quota, used)
        used[mined] = True
        shortfall += quota - mined.size
        history.append((k, len(forest), int(mined.size)))
        if log:
            log(f"stage {k}: {len(forest)} trees, +{mined.size} hard negatives, set size {n_pos + used.sum()}")

    final_stage = len(cfg.stage_trees) + 1
    final = fit(cfg.final_trees, final_stage)
    losses.append(final.loss_history)
    history.append((final_stage, len(final), 0))
    if log:
        log(f"final: {len(final)} trees on {n_pos + used.sum()} examples")
    final.stage_history = history
    final.config = {**cfg.to_dict(), "negative_shortfall": int(shortfall), "num_positive": int(n_pos),
                    "num_negative_used": int(used.sum())}
    final.stage_losses = losses
    return final


def save_model(forest: Forest) -> bytes:
    header = {
        "uses_prior": bool(forest.uses_prior),
        "clamp_eps": float(forest.clamp_eps),
        "n_features": forest.n_features,
        "stage_history": [list(map(int, h)) for h in forest.stage_history],
        "truncated": bool(forest.truncated),
        "config": forest.config,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(hb)), hb, struct.pack("<I", len(forest.trees))]
    parts.append(np.array([len(t) for t in forest.trees], dtype="<u4").tobytes())
    for name, dt in (("feature", "<i4"), ("threshold", "<f4"), ("left", "<i4"), ("right", "<i4"), ("value", "<f4")):
        for t in forest.trees:
            parts.append(getattr(t, name).astype(dt).tobytes())
    return b"".join(parts)


def load_model(raw: bytes) -> Forest:
    if len(raw) < 12 or raw[:4] != MODEL_MAGIC:
        raise ValueError("not an RBFX model file")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model version {version}")
    pos = 12
    if len(raw) < pos + hlen + 4:
        raise ValueError("truncated model header")
    header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    (n_trees,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if len(raw) < pos + 4 * n_trees:
        raise ValueError("truncated model tree table")
    sizes = np.frombuffer(raw, dtype="<u4", count=n_trees, offset=pos).astype(np.int64)
    pos += 4 * n_trees
    total = int(sizes.sum())
    if len(raw) != pos + 20 * total:
        raise ValueError("model payload size mismatch (truncated or corrupt file)")
    arrays = {}
    for name, dt, out in (("feature", "<i4", np.int32), ("threshold", "<f4", np.float32), ("left", "<i4", np.int32),
                          ("right", "<i4", np.int32), ("value", "<f4", np.float32)):
        arrays[name] = np.frombuffer(raw, dtype=dt, count=total, offset=pos).astype(out)
        pos += 4 * total
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    trees = [
        Tree(*(arrays[k][bounds[i]:bounds[i + 1]].copy() for k in ("feature", "threshold", "left", "right", "value")))
        for i in range(n_trees)
    ]
    return Forest(
        trees=trees,
        uses_prior=header["uses_prior"],
        clamp_eps=header["clamp_eps"],
        n_features=header["n_features"],
        stage_history=[tuple(h) for h in header["stage_history"]],
        config=header["config"],
        truncated=header.get("truncated", False),
    )
