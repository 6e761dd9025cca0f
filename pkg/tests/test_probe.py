import numpy as np
import pytest

from vimkit import probe
from vimkit import prior as pr
from vimkit.errors import ConfigError
from vimkit.prior import PriorConfig


class TestProbe:
    def test_random_features_near_chance(self):
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=(2000, 16)), rng.integers(0, 10, 2000)
        xv, yv = rng.normal(size=(2000, 16)), rng.integers(0, 10, 2000)
        acc = probe.probe_eval(probe.probe_train(x, y, 10, steps=200), xv, yv)
        assert abs(acc - 0.1) < 0.04

    def test_separable_features(self):
        rng = np.random.default_rng(1)
        centers = rng.normal(0, 5, size=(10, 8))
        y = rng.integers(0, 10, 1000)
        x = centers[y] + rng.normal(size=(1000, 8)) * 0.3
        head = probe.probe_train(x[:800], y[:800], 10, steps=300)
        assert probe.probe_eval(head, x[800:], y[800:]) > 0.99

    def test_standardization_stored(self):
        rng = np.random.default_rng(2)
        x = rng.normal(3.0, 2.0, size=(50, 4))
        head = probe.probe_train(x, rng.integers(0, 2, 50), 2, steps=1)
        np.testing.assert_allclose(head.mean, x.mean(0))
        assert head.logits(x).shape == (50, 2)

    def test_default_block(self):
        assert probe.default_block(36) == 15
        assert probe.default_block(4) == 2
        assert probe.default_block(1) == 0
        assert probe.default_block(2) == 1

    def test_errors(self):
        with pytest.raises(ConfigError):
            probe.probe_train(np.zeros((0, 2)), np.zeros(0, dtype=int), 2)
        with pytest.raises(ConfigError):
            probe.probe_train(np.zeros((2, 2)), np.array([0, 2]), 2)

    def test_sweep_shapes(self):
        cfg = PriorConfig(blocks=2, heads=2, d_model=8, d_hidden=16, K=8, grid_h=2, grid_w=2)
        p = pr.init_prior(cfg, np.random.default_rng(0), np.float64)
        rng = np.random.default_rng(3)
        ids, y = rng.integers(0, 8, (20, 4)), rng.integers(0, 2, 20)
        out = probe.probe_sweep(ids, y, ids, y, p, cfg, 2, steps=5)
        assert [b for b, _ in out] == [0, 1]
        assert all(0.0 <= a <= 1.0 for _, a in out)
        with pytest.raises(ConfigError):
            probe.probe_sweep(ids, y, ids, y, p, cfg, 2, blocks=[2])
