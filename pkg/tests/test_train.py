import numpy as np
import pytest

from vimkit import train
from vimkit.checkpoint import load_checkpoint
from vimkit.codec import CodecConfig
from vimkit.data import SyntheticSpec, generate_arrays
from vimkit.errors import ConfigError, NumericError
from vimkit.prior import PriorConfig
from vimkit.quantizer import QuantizerConfig
from vimkit.train import TrainConfig


def _codec_cfg(**kw):
    return CodecConfig(image_size=16, patch_size=4, enc_d_model=16, enc_d_hidden=32, dec_d_model=16, dec_d_hidden=32,
                       enc_blocks=1, dec_blocks=1, quantizer=QuantizerConfig(K=32, d_model=16, d_lookup=4), **kw)


@pytest.fixture(scope="module")
def images():
    imgs, _, _ = generate_arrays(SyntheticSpec(image_size=16, samples_per_class=6))
    return imgs


def _prior_setup(steps=20):
    rng = np.random.default_rng(0)
    ids = rng.integers(0, 8, (40, 4))
    labels = rng.integers(0, 3, 40)
    cfg = PriorConfig(blocks=1, heads=2, d_model=16, d_hidden=32, dropout=0.1, K=8, grid_h=2, grid_w=2, num_classes=3)
    tc = TrainConfig.stage2(steps=steps, batch_size=4, dtype="float64")
    return ids, labels, cfg, tc


class TestSmoke:
    def test_stage1_loss_decreases(self, images):
        tc = TrainConfig.stage1(steps=200, batch_size=8, peak_lr=3e-3)
        state = train.train_stage1(images, _codec_cfg(), tc)
        assert state.step == 200
        loss = train.smoothed([r["loss"] for r in state.history])
        assert loss[-1] < loss[20]
        assert all(np.isfinite(r["loss"]) for r in state.history)
        assert {"vq", "logit_laplace", "l2", "lr", "grad_norm", "batch_fraction_used"} <= set(state.history[0])

    def test_stage1_discriminator_records(self, images):
        tc = TrainConfig.stage1(steps=3, batch_size=2)
        state = train.train_stage1(images, _codec_cfg(discriminator=True), tc)
        assert "d_loss" in state.history[-1] and "adv" in state.history[-1]

    def test_stage2_loss_decreases(self):
        ids, labels, cfg, tc = _prior_setup(200)
        ids = np.tile(np.arange(4), (40, 1)) % 8
        state = train.train_stage2(ids, labels, cfg, tc)
        loss = train.smoothed([r["loss"] for r in state.history])
        assert loss[-1] < 0.5 * loss[0]

    def test_evaluate_codec_keys(self, images):
        cfg = _codec_cfg()
        state = train.init_stage1(cfg, TrainConfig.stage1(steps=1))
        ev = train.evaluate_codec(state.params, cfg, images[:10])
        assert set(ev) >= {"eval_l2", "eval_logit_laplace", "eval_vq", "fraction_used", "perplexity"}


class TestResume:
    def test_stage1_bit_exact(self, images, tmp_path):
        tc = TrainConfig.stage1(steps=6, batch_size=2)
        whole = train.train_stage1(images, _codec_cfg(), tc)
        half = train.init_stage1(_codec_cfg(), tc)
        train.run(half, 3, (images,), checkpoint_path=tmp_path / "a.vimc")
        resumed = train.load_state(tmp_path / "a.vimc")
        train.run(resumed, 3, (images,))
        assert resumed.step == 6
        for k in whole.params:
            np.testing.assert_array_equal(resumed.params[k].data, whole.params[k].data)

    def test_stage2_bit_exact(self, tmp_path):
        ids, labels, cfg, tc = _prior_setup(10)
        whole = train.train_stage2(ids, labels, cfg, tc)
        half = train.init_stage2(cfg, tc)
        train.run(half, 5, (ids, labels), checkpoint_path=tmp_path / "p.vimc")
        resumed = train.load_state(tmp_path / "p.vimc")
        train.run(resumed, 5, (ids, labels))
        for k in whole.params:
            np.testing.assert_array_equal(resumed.params[k].data, whole.params[k].data)
        assert [r["loss"] for r in resumed.history[-5:]] == [r["loss"] for r in whole.history[-5:]]

    def test_load_model_stage_check(self, tmp_path):
        ids, labels, cfg, tc = _prior_setup(2)
        train.train_stage2(ids, labels, cfg, tc, checkpoint_path=tmp_path / "p.vimc")
        params, mc = train.load_model(tmp_path / "p.vimc", expect_stage=2)
        assert mc == cfg
        with pytest.raises(ConfigError):
            train.load_model(tmp_path / "p.vimc", expect_stage=1)


class TestFailures:
    def test_nan_keeps_last_checkpoint(self, tmp_path):
        ids, labels, cfg, tc = _prior_setup(20)
        tc.checkpoint_every = 2
        path = tmp_path / "p.vimc"
        state = train.init_stage2(cfg, tc)
        train.run(state, 4, (ids, labels), checkpoint_path=path)
        before = path.read_bytes()
        state.params["prior.tok"].data[:] = np.nan
        with pytest.raises(NumericError):
            train.run(state, 4, (ids, labels), checkpoint_path=path)
        assert path.read_bytes() == before
        assert load_checkpoint(path).step == 4

    def test_vocabulary_mismatch(self):
        ids, labels, cfg, tc = _prior_setup(2)
        with pytest.raises(ConfigError):
            train.train_stage2(ids, labels, cfg, tc, K=16)
        with pytest.raises(ConfigError):
            train.train_stage2(ids + 8, labels, cfg, tc)

    def test_empty_dataset(self):
        with pytest.raises(ConfigError):
            train.train_stage1(np.zeros((0, 16, 16, 3)), _codec_cfg(), TrainConfig.stage1(steps=1))

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            TrainConfig(dtype="float16").validate()


class TestAugment:
    def test_shape_range_determinism(self, images):
        a = train.augment_batch(images[:4], np.random.default_rng(0))
        b = train.augment_batch(images[:4], np.random.default_rng(0))
        np.testing.assert_array_equal(a, b)
        assert a.shape == images[:4].shape
        assert a.min() >= images[:4].min() - 1e-6 and a.max() <= images[:4].max() + 1e-6

    def test_full_scale_identity_or_flip(self, images):
        out = train.augment_batch(images[:6], np.random.default_rng(1), scale=(1.0, 1.0))
        for o, x in zip(out, images[:6]):
            assert np.allclose(o, x, atol=1e-6) or np.allclose(o, x[:, ::-1], atol=1e-6)


class TestSmoothed:
    def test_constant(self):
        np.testing.assert_allclose(train.smoothed([2.0] * 5), 2.0)
