import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rpnbf import kernels
from rpnbf.forest import (
    NUM_BINS,
    CascadeConfig,
    Forest,
    QuantTable,
    TrainSet,
    Tree,
    _best_split,
    boost,
    f0_from_score,
    load_model,
    loss_is_monotone,
    mine_hard_negatives,
    save_model,
    score,
    stage_seed,
    train_cascade,
    train_tree,
)


def brute_split(xq, w, y):
    """Scan every (feature, bin) split with explicit loops; lowest index wins ties."""
    n, d = xq.shape
    best = None
    for f in range(d):
        for b in range(1, NUM_BINS):
            lp = ln = rp = rn = 0.0
            nl = nr = 0
            for i in range(n):
                if xq[i, f] < b:
                    nl += 1
                    if y[i] > 0:
                        lp += w[i]
                    else:
                        ln += w[i]
                else:
                    nr += 1
                    if y[i] > 0:
                        rp += w[i]
                    else:
                        rn += w[i]
            if nl == 0 or nr == 0:
                continue
            z = 2 * (math.sqrt(lp * ln) + math.sqrt(rp * rn))
            if best is None or z < best[0]:
                best = (z, f, b)
    return best


def walk(nested, x):
    while isinstance(nested, tuple):
        f, t, l, r = nested
        nested = l if x[f] < t else r
    return nested


def small_set(rng, n=64, d=3):
    X = rng.normal(size=(n, d)).astype(np.float32)
    y = np.where(X[:, 0] + 0.5 * rng.normal(size=n) > 0, 1, -1)
    return X, y


class TestPrior:
    @pytest.mark.parametrize("s,want", [(0.5, 0.0), (0.75, 0.5 * math.log(3)), (0.1, 0.5 * math.log(1 / 9))])
    def test_values(self, s, want):
        assert f0_from_score(s) == pytest.approx(want, abs=1e-15)

    def test_clamped(self):
        assert f0_from_score(1.0) == pytest.approx(0.5 * math.log((1 - 1e-6) / 1e-6))
        assert f0_from_score(0.0) == pytest.approx(-f0_from_score(1.0), rel=1e-10)

    def test_array(self):
        np.testing.assert_allclose(f0_from_score(np.array([0.5, 0.75])), [0, 0.5 * math.log(3)])


class TestQuantTable:
    def test_bins_span_range(self):
        X = np.linspace(0, 1, 1000, dtype=np.float32)[:, None]
        q = QuantTable.fit(X).transform(X)
        assert q.shape == (1, 1000)
        assert q.min() == 0 and q.max() == 255
        assert np.all(np.diff(q[0].astype(int)) >= 0)

    def test_constant_column(self):
        X = np.full((5, 1), 3.0, dtype=np.float32)
        q = QuantTable.fit(X).transform(X)
        assert np.all(q == q[0, 0])

    def test_bin_matches_edge_count(self, rng):
        X = rng.normal(size=(200, 2)).astype(np.float32)
        qt = QuantTable.fit(X)
        q = qt.transform(X)
        for f in range(2):
            for i in range(0, 200, 17):
                assert q[f, i] == int(np.count_nonzero(qt.edges[f] <= X[i, f]))


class TestSplitFinding:
    def test_histograms_match_brute_force(self, backend, rng):
        X, y = small_set(rng, 100, 4)
        xq_t = np.ascontiguousarray(QuantTable.fit(X).transform(X))
        w = rng.random(100)
        pos = (y > 0).astype(np.uint8)
        idx = np.arange(0, 100, 3, dtype=np.int64)
        feats = np.array([1, 3], dtype=np.int64)
        h = kernels.backend.histograms(xq_t, idx, feats, w, pos)
        want = np.zeros((2, 2, NUM_BINS))
        for k, f in enumerate(feats):
            for i in idx:
                want[k, pos[i], xq_t[f, i]] += w[i]
        np.testing.assert_allclose(h, want, rtol=1e-12, atol=0)

    @pytest.mark.parametrize("seed", range(5))
    def test_root_split_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        X, y = small_set(rng, 64, 3)
        qt = QuantTable.fit(X)
        xq = qt.transform(X).T
        # uniform weights of 1/64 keep every partial sum exact
        w = np.full(64, 1 / 64)
        z, f, b = brute_split(xq, w, y)
        tree = train_tree(TrainSet(X, y, np.full(64, 0.5)), qt, depth=1)
        assert tree.feature[0] == f
        assert tree.threshold[0] == qt.edges[f, b - 1]

    def test_no_valid_split(self):
        hist = np.zeros((2, 2, NUM_BINS))
        hist[:, 0, 7] = 1.0
        hist[:, 1, 7] = 1.0
        assert _best_split(hist) is None

    def test_tie_goes_to_lowest_feature(self):
        hist = np.zeros((3, 2, NUM_BINS))
        for k in range(3):
            hist[k, 0, 10] = hist[k, 1, 200] = 1.0
        assert _best_split(hist) == (0, 11)


class TestTree:
    def test_leaf_values(self):
        X = np.array([[0.0], [0.0], [1.0], [1.0], [1.0]], dtype=np.float32)
        y = np.array([1, -1, 1, 1, -1])
        ts = TrainSet(X, y, np.full(5, 0.5))
        tree = train_tree(ts, QuantTable.fit(X), depth=1)
        left, right = tree.to_nested()[2:]
        assert left == pytest.approx(0.5 * math.log((0.2 + 1e-6) / (0.2 + 1e-6)), abs=1e-7)
        assert right == pytest.approx(0.5 * math.log((0.4 + 1e-6) / (0.2 + 1e-6)), rel=1e-6)

    def test_pure_set_is_single_leaf(self):
        X = np.arange(4, dtype=np.float32)[:, None]
        tree = train_tree(TrainSet(X, np.ones(4), np.full(4, 0.5)), QuantTable.fit(X), depth=3)
        assert len(tree) == 1
        assert tree.value[0] == np.float32(0.5 * math.log((1 + 1e-6) / 1e-6))

    def test_depth_limit(self, rng):
        X, y = small_set(rng, 300, 5)
        tree = train_tree(TrainSet(X, y, np.full(300, 0.5)), QuantTable.fit(X), depth=3)
        assert tree.depth <= 3

    def test_predict_matches_walk(self, backend, rng):
        X, y = small_set(rng, 200, 4)
        tree = train_tree(TrainSet(X, y, np.full(200, 0.5)), QuantTable.fit(X), depth=4)
        nested = tree.to_nested()
        np.testing.assert_array_equal(tree.predict(X), [walk(nested, x) for x in X])


class TestBoost:
    def test_margins_equal_prior_plus_trees(self, backend, rng):
        X, y = small_set(rng, 150, 6)
        priors = rng.uniform(0.05, 0.95, 150)
        f = boost(TrainSet(X, y, priors), 20, 2, 3, feature_fraction=0.5)
        np.testing.assert_allclose(f.score_many(X, priors), f.margins, rtol=1e-6, atol=1e-6)

    def test_loss_monotone(self, rng):
        X, y = small_set(rng, 200, 3)
        f = boost(TrainSet(X, y, rng.uniform(0.1, 0.9, 200)), 50, 2)
        assert len(f.loss_history) == 51
        assert loss_is_monotone(f.loss_history)

    def test_loss_history_is_log_exponential_loss(self, rng):
        X, y = small_set(rng, 80, 2)
        f = boost(TrainSet(X, y, np.full(80, 0.5)), 5, 2, uses_prior=False)
        F = f.tree_sum(X)
        assert f.loss_history[-1] == pytest.approx(math.log(np.exp(-y * F).sum()), rel=1e-9)
        assert f.loss_history[0] == pytest.approx(math.log(80))

    def test_separable_reaches_zero_error(self):
        rng = np.random.default_rng(0)
        X = rng.uniform(-1, 1, (500, 2)).astype(np.float32)
        normal = rng.normal(size=2)
        y = np.where(X @ normal > 0, 1, -1)
        f = boost(TrainSet(X, y, np.full(500, 0.5)), 64, 2, 0, uses_prior=False)
        assert np.all(np.sign(f.tree_sum(X)) == y)

    def test_deterministic(self, rng):
        X, y = small_set(rng, 100, 8)
        ts = TrainSet(X, y, np.full(100, 0.5))
        a = boost(ts, 10, 2, 5, feature_fraction=0.25)
        b = boost(ts, 10, 2, 5, feature_fraction=0.25)
        assert save_model(a) == save_model(b)

    def test_errors(self, rng):
        X, y = small_set(rng, 10, 2)
        with pytest.raises(ValueError):
            boost(TrainSet(X, y, np.full(10, 0.5)), -1, 2)
        with pytest.raises(ValueError):
            TrainSet(X, np.zeros(10), np.full(10, 0.5))
        with pytest.raises(ValueError):
            TrainSet(X, y, np.full(9, 0.5))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_monotone_property(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(5, 60))
        X = rng.normal(size=(n, 3)).astype(np.float32)
        y = rng.choice([-1, 1], n)
        f = boost(TrainSet(X, y, rng.uniform(0.01, 0.99, n)), 15, 2, seed)
        assert loss_is_monotone(f.loss_history)

    def test_monotone_checker(self):
        assert loss_is_monotone([3.0, 2.0, 2.0, 1.0])
        assert not loss_is_monotone([3.0, 2.0, 2.1])


class TestScore:
    def test_prior_only(self):
        f = Forest()
        assert score(f, np.zeros(3), 0.75) == pytest.approx(0.5 * math.log(3))

    def test_without_prior(self):
        f = Forest(uses_prior=False)
        assert score(f, np.zeros(3), 0.75) == 0.0

    def test_wrong_length(self):
        with pytest.raises(ValueError):
            Forest(n_features=3).tree_sum(np.zeros((1, 4)))


class TestCascade:
    @pytest.fixture
    def data(self, rng):
        pos = rng.normal(1.0, 1.0, (60, 5)).astype(np.float32)
        neg = rng.normal(-0.5, 1.0, (400, 5)).astype(np.float32)
        return pos, neg, rng.uniform(0.3, 0.9, 60), rng.uniform(0.1, 0.7, 400)

    def test_history_and_quota(self, data):
        pos, neg, ps, ns = data
        cfg = CascadeConfig(stage_trees=(4, 8), final_trees=12, depth=2, feature_fraction=1.0)
        f = train_cascade(pos, neg, cfg, ps, ns)
        assert f.stage_history == [(1, 4, 6), (2, 8, 6), (3, 12, 0)]
        assert len(f) == 12
        assert f.config["num_negative_used"] == 60 + 12
        assert all(loss_is_monotone(h) for h in f.stage_losses)

    def test_mining_takes_top_scores(self, data, rng):
        pos, neg, ps, ns = data
        ts = TrainSet(np.concatenate([pos, neg[:60]]), np.r_[np.ones(60), -np.ones(60)], np.r_[ps, ns[:60]])
        f = boost(ts, 5, 2)
        used = np.zeros(400, dtype=bool)
        used[:60] = True
        got = mine_hard_negatives(f, neg, ns, 7, used)
        s = f.score_many(neg, ns)
        ranked = sorted(range(60, 400), key=lambda i: (-s[i], i))
        assert got.tolist() == ranked[:7]

    def test_pool_exhaustion(self, data):
        pos, neg, ps, ns = data
        cfg = CascadeConfig(stage_trees=(2, 2), final_trees=2, depth=1, hard_negative_fraction=1.0)
        f = train_cascade(pos, neg[:90], cfg, ps, ns[:90])
        assert [h[2] for h in f.stage_history] == [30, 0, 0]
        # quota 60 per stage: 30 short after stage 1, 60 short after stage 2
        assert f.config["negative_shortfall"] == 90

    def test_deterministic(self, data):
        pos, neg, ps, ns = data
        cfg = CascadeConfig(stage_trees=(3,), final_trees=5, depth=2, feature_fraction=0.4, seed=9)
        assert save_model(train_cascade(pos, neg, cfg, ps, ns)) == save_model(train_cascade(pos, neg, cfg, ps, ns))

    def test_stage_seeds_differ(self):
        assert len({stage_seed(0, k) for k in range(1, 8)}) == 7
        assert stage_seed(1, 1) != stage_seed(0, 1)

    def test_no_positives(self):
        with pytest.raises(ValueError):
            train_cascade(np.zeros((0, 2)), np.zeros((5, 2)))

    def test_config_round_trip(self):
        cfg = CascadeConfig(stage_trees=(1, 2), seed=4)
        assert CascadeConfig.from_dict(cfg.to_dict()) == cfg


class TestModelIO:
    def test_round_trip(self, backend, rng):
        X, y = small_set(rng, 120, 4)
        f = boost(TrainSet(X, y, np.full(120, 0.5)), 8, 3)
        f.stage_history = [(1, 8, 0)]
        g = load_model(save_model(f))
        assert len(g) == 8 and g.stage_history == [(1, 8, 0)]
        np.testing.assert_array_equal(g.tree_sum(X), f.tree_sum(X))
        assert save_model(g) == save_model(f)

    def test_empty_forest(self):
        assert len(load_model(save_model(Forest()))) == 0

    @pytest.mark.parametrize("cut", [3, 11, 20, -1])
    def test_truncated(self, rng, cut):
        X, y = small_set(rng, 30, 2)
        raw = save_model(boost(TrainSet(X, y, np.full(30, 0.5)), 2, 2))
        with pytest.raises(ValueError):
            load_model(raw[:cut])

    def test_bad_magic_and_version(self):
        with pytest.raises(ValueError):
            load_model(b"NOPE" + bytes(20))
        raw = bytearray(save_model(Forest()))
        raw[4] = 9
        with pytest.raises(ValueError):
            load_model(bytes(raw))

    def test_tree_predict_via_nested(self):
        t = Tree(np.array([0, -1, -1], np.int32), np.array([0.5, 0, 0], np.float32),
                 np.array([1, -1, -1], np.int32), np.array([2, -1, -1], np.int32),
                 np.array([0, -1.0, 2.0], np.float32))
        np.testing.assert_array_equal(t.predict(np.array([[0.0], [0.5], [1.0]])), [-1.0, 2.0, 2.0])
        assert t.depth == 1
