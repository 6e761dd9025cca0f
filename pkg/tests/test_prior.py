import math

import numpy as np
import pytest

from vimkit import prior as pr
from vimkit import tensor as T
from vimkit.errors import ConfigError, SamplingError
from vimkit.prior import PriorConfig, TokenGrid


def _randomize(params, rng, scale=0.3):
    for p in params.values():
        p.data = p.data + rng.normal(0, scale, size=p.shape)
    return params


@pytest.fixture
def cond():
    cfg = PriorConfig(blocks=2, heads=2, d_model=16, d_hidden=32, dropout=0.0, K=8, grid_h=2, grid_w=3, num_classes=4)
    return cfg, _randomize(pr.init_prior(cfg, np.random.default_rng(0), np.float64), np.random.default_rng(1))


@pytest.fixture
def uncond():
    cfg = PriorConfig(blocks=2, heads=2, d_model=16, d_hidden=32, dropout=0.0, K=8, grid_h=2, grid_w=2)
    return cfg, _randomize(pr.init_prior(cfg, np.random.default_rng(0), np.float64), np.random.default_rng(2))


class TestEmbedding:
    def test_sequence_lengths(self):
        rng = np.random.default_rng(0)
        cfg_c = PriorConfig(K=16, num_classes=10)
        cfg_u = PriorConfig(K=16)
        ids = rng.integers(0, 16, 64)
        p_c = pr.init_prior(cfg_c, rng, np.float64)
        p_u = pr.init_prior(cfg_u, rng, np.float64)
        assert pr.embed_sequence(TokenGrid(8, 8, ids, 3), p_c, cfg_c).shape == (65, 64)
        assert pr.embed_sequence(TokenGrid(8, 8, ids), p_u, cfg_u).shape == (64, 64)

    def test_class_changes_only_first_position(self, cond):
        cfg, p = cond
        ids = np.arange(6) % 8
        a = pr.embed_sequence(TokenGrid(2, 3, ids, 0), p, cfg).data
        b = pr.embed_sequence(TokenGrid(2, 3, ids, 1), p, cfg).data
        assert not np.allclose(a[0], b[0])
        np.testing.assert_array_equal(a[1:], b[1:])

    def test_position_embedding_is_row_plus_col(self, cond):
        cfg, p = cond
        ids = np.zeros(6, dtype=int)
        e = pr.embed_sequence(TokenGrid(2, 3, ids, 0), p, cfg).data[1:]
        for pos in range(6):
            expect = p["prior.tok"].data[0] + p["prior.row"].data[pos // 3] + p["prior.col"].data[pos % 3]
            np.testing.assert_allclose(e[pos], expect, atol=1e-12)

    def test_label_errors(self, cond, uncond):
        cfg, p = cond
        with pytest.raises(ConfigError):
            pr.embed_sequence(TokenGrid(2, 3, np.zeros(6)), p, cfg)
        with pytest.raises(T.IndexRangeError):
            pr.embed_sequence(TokenGrid(2, 3, np.zeros(6), 4), p, cfg)
        ucfg, up = uncond
        with pytest.raises(ConfigError):
            pr.embed_sequence(TokenGrid(2, 2, np.zeros(4), 0), up, ucfg)

    def test_token_range(self, cond):
        cfg, p = cond
        with pytest.raises(T.IndexRangeError):
            pr.embed_sequence(TokenGrid(2, 3, [0, 1, 2, 3, 4, 8], 0), p, cfg)
        with pytest.raises(ConfigError):
            TokenGrid(2, 3, np.zeros(5))


class TestCausality:
    def test_logits_ignore_future(self, cond):
        cfg, p = cond
        rng = np.random.default_rng(3)
        ids = rng.integers(0, 8, (1, 6))
        seq = pr.model_inputs(ids, [2], p, cfg)
        base = pr.forward_causal(seq, p, cfg).data
        for j in range(1, 7):
            ids2 = ids.copy()
            ids2[0, j - 1] = (ids2[0, j - 1] + 1) % 8
            out = pr.forward_causal(pr.model_inputs(ids2, [2], p, cfg), p, cfg).data
            np.testing.assert_array_equal(out[0, :j], base[0, :j])
            assert not np.allclose(out[0, j:], base[0, j:])

    def test_too_long(self, cond):
        cfg, p = cond
        with pytest.raises(T.ShapeError):
            pr.forward_causal(T.Tensor(np.zeros((1, 8, 16))), p, cfg)


class TestNLL:
    def test_uniform_at_init(self):
        cfg = PriorConfig(blocks=1, heads=2, d_model=16, d_hidden=32, K=37, grid_h=2, grid_w=2)
        p = pr.init_prior(cfg, np.random.default_rng(0), np.float64)
        grid = TokenGrid(2, 2, [0, 5, 36, 1])
        assert pr.nll(grid, p, cfg) == pytest.approx(math.log(37), abs=1e-12)

    def test_manual_loop(self, uncond):
        cfg, p = uncond
        ids = np.array([3, 1, 7, 0])
        logits = pr.forward_causal(pr.model_inputs(ids[None], None, p, cfg), p, cfg).data[0]
        total = 0.0
        for i in range(4):
            z = logits[i]
            total += -(z[ids[i]] - math.log(sum(math.exp(v) for v in z)))
        assert pr.nll(TokenGrid(2, 2, ids), p, cfg) == pytest.approx(total / 4, abs=1e-10)

    def test_per_grid_matches_nll(self, cond):
        cfg, p = cond
        rng = np.random.default_rng(4)
        ids = rng.integers(0, 8, (5, 6))
        labels = rng.integers(0, 4, 5)
        per = pr.per_grid_nll(ids, labels, p, cfg, batch_size=2)
        for i in range(5):
            assert per[i] == pytest.approx(pr.nll(TokenGrid(2, 3, ids[i], int(labels[i])), p, cfg), abs=1e-10)

    def test_vocabulary_check(self, cond):
        cfg, p = cond
        with pytest.raises(ConfigError):
            pr.nll_batch(np.full((1, 6), 8), [0], p, cfg)

    def test_dropout_modes(self):
        cfg = PriorConfig(blocks=1, heads=2, d_model=16, d_hidden=32, dropout=0.5, K=8, grid_h=2, grid_w=2)
        p = _randomize(pr.init_prior(cfg, np.random.default_rng(0), np.float64), np.random.default_rng(1))
        ids = np.array([[1, 2, 3, 4]])
        e1 = pr.nll_batch(ids, None, p, cfg).item()
        e2 = pr.nll_batch(ids, None, p, cfg).item()
        assert e1 == e2
        t1 = pr.nll_batch(ids, None, p, cfg, training=True, rng=np.random.default_rng(0)).item()
        t2 = pr.nll_batch(ids, None, p, cfg, training=True, rng=np.random.default_rng(1)).item()
        assert t1 != t2


class TestCache:
    def test_cached_logits_match_forward(self, cond):
        cfg, p = cond
        rng = np.random.default_rng(5)
        ids = rng.integers(0, 8, (3, 6))
        labels = np.array([0, 3, 1])
        full = pr.forward_causal(pr.model_inputs(ids, labels, p, cfg), p, cfg).data[:, :6]
        np.testing.assert_allclose(pr.cached_logits(ids, labels, p, cfg), full, atol=1e-10)

    def test_cache_full(self, uncond):
        cfg, p = uncond
        dec = pr.IncrementalDecoder(p, cfg, 1)
        for _ in range(cfg.max_len):
            dec.step(dec.prefix_embedding(None))
        with pytest.raises(T.ShapeError):
            dec.step(dec.prefix_embedding(None))


class TestSampling:
    def test_deterministic(self, cond):
        cfg, p = cond
        a = pr.sample(p, cfg, 4, class_label=2, seed=11)
        b = pr.sample(p, cfg, 4, class_label=2, seed=11)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.indices, y.indices)
            assert x.class_label == 2 and x.height == 2 and x.width == 3

    def test_low_temperature_is_greedy(self, cond):
        cfg, p = cond
        grids = pr.sample(p, cfg, 3, class_label=1, temperature=1e-6, seed=0)
        ids = np.zeros((3, 0), dtype=int)
        for _ in range(6):
            logits = pr.forward_causal(pr.model_inputs(ids, [1, 1, 1], p, cfg), p, cfg).data[:, -1]
            ids = np.concatenate([ids, logits.argmax(1)[:, None]], axis=1)
        np.testing.assert_array_equal(np.stack([g.indices for g in grids]), ids)

    def test_empirical_first_token(self, uncond):
        cfg, p = uncond
        grids = pr.sample(p, cfg, 4000, seed=0)
        first = np.bincount([g.indices[0] for g in grids], minlength=8) / 4000
        z = pr.cached_logits(np.zeros((1, 1), dtype=int), None, p, cfg)[0, 0]
        probs = np.exp(z - z.max())
        probs /= probs.sum()
        np.testing.assert_allclose(first, probs, atol=0.03)

    def test_bad_temperature(self, cond):
        cfg, p = cond
        with pytest.raises(ConfigError):
            pr.sample(p, cfg, 1, 0, temperature=0.0)


class TestRejection:
    def test_rate_one_equals_sample(self, cond):
        cfg, p = cond
        plain = pr.sample(p, cfg, 5, 1, seed=3)
        rej = pr.rejection_sample(p, cfg, 1, 1.0, lambda gs: np.zeros(len(gs)), 5, seed=3)
        for a, b in zip(plain, rej):
            np.testing.assert_array_equal(a.indices, b.indices)

    def test_half_keeps_top_scores(self, cond):
        cfg, p = cond
        candidates = pr.sample(p, cfg, 10, 1, seed=3)
        scorer = lambda gs: [float(g.indices.sum()) for g in gs]  # noqa: E731
        kept = pr.rejection_sample(p, cfg, 1, 0.5, scorer, 5, seed=3)
        assert len(kept) == 5
        scores = np.array(scorer(candidates))
        order = np.sort(np.argsort(-scores, kind="stable")[:5])
        for g, i in zip(kept, order):
            np.testing.assert_array_equal(g.indices, candidates[i].indices)

    def test_errors(self, cond):
        cfg, p = cond
        with pytest.raises(ConfigError):
            pr.rejection_sample(p, cfg, 1, 0.0, lambda gs: [], 2)
        with pytest.raises(SamplingError):
            pr.rejection_sample(p, cfg, 1, 0.5, lambda gs: [0.0], 2)

        def boom(gs):
            raise RuntimeError("x")
        with pytest.raises(SamplingError):
            pr.rejection_sample(p, cfg, 1, 0.5, boom, 2)


class TestFeatures:
    def test_matches_manual_average(self, cond):
        cfg, p = cond
        rng = np.random.default_rng(6)
        ids = rng.integers(0, 8, (3, 6))
        labels = np.array([0, 1, 2])
        hidden = []
        with T.no_grad():
            pr.forward_causal(pr.model_inputs(ids, labels, p, cfg), p, cfg, hidden=hidden)
        for b in range(cfg.blocks):
            manual = np.array([[hidden[b].data[i, 1 + t] for t in range(6)]
                               for i in range(3)]).mean(axis=1)
            np.testing.assert_allclose(pr.extract_features(ids, labels, p, cfg, b, batch_size=2), manual, atol=1e-12)

    def test_bad_block(self, cond):
        cfg, p = cond
        with pytest.raises(ConfigError):
            pr.extract_features(np.zeros((1, 6), dtype=int), [0], p, cfg, 2)


class TestConfig:
    def test_validate(self):
        with pytest.raises(ConfigError):
            PriorConfig(dropout=1.0).validate()
        with pytest.raises(ConfigError):
            PriorConfig(heads=3).validate()
        with pytest.raises(ConfigError):
            PriorConfig(K=1).validate()

    def test_stack_grids(self):
        ids, labels = pr.stack_grids([TokenGrid(1, 2, [0, 1], 3), TokenGrid(1, 2, [1, 1], 0)])
        np.testing.assert_array_equal(labels, [3, 0])
        with pytest.raises(ConfigError):
            pr.stack_grids([TokenGrid(1, 2, [0, 1], 3), TokenGrid(1, 2, [1, 1])])
