import numpy as np
import pytest

from vimkit import gradcheck as gc
from vimkit import nn
from vimkit import tensor as T


def _bad_square(x):
    # forward x**2, backward deliberately 3x instead of 2x
    return T._result(x.data ** 2, (x,), lambda g: (g * 3.0 * x.data,))


class TestGradCheck:
    def test_sum_of_squares(self, rng):
        x = rng.normal(size=(4, 5))
        rep = gc.grad_check(lambda ts: T.sum_(ts["x"] * ts["x"]), {"x": x}, max_coords=20)
        assert rep.max_rel_err < 1e-8
        assert rep.coords == 20
        assert rep.passed

    def test_vit_block_at_wider_step(self):
        rng = np.random.default_rng(5)
        p = {}
        nn.init_block(p, "blk", 16, 64, rng, np.float64)
        for k in p:
            p[k].data = p[k].data + rng.normal(0, 0.1, size=p[k].shape)
        w = rng.normal(size=(2, 4, 16))
        inputs = {k: v.data for k, v in p.items()}
        inputs["x"] = rng.normal(size=(2, 4, 16))

        def f(ts):
            return T.sum_(nn.block(ts, "blk", ts["x"], 4) * w)
        rep = gc.grad_check(f, inputs, h=1e-4, max_coords=8)
        assert rep.max_rel_err < 1e-4, rep

    def test_negative_control(self, rng):
        x = rng.uniform(0.5, 2.0, size=(3, 3))
        rep = gc.grad_check(lambda ts: T.sum_(_bad_square(ts["x"])), {"x": x})
        assert rep.max_rel_err > 1e-2
        assert not rep.passed

    def test_straight_through_surrogate(self, rng):
        x = rng.normal(size=(3, 4))
        target = rng.normal(size=(3, 4))
        w = rng.normal(size=(3, 4))
        rep = gc.grad_check(lambda ts: T.sum_(T.straight_through(ts["x"], target) * ts["x"] * w), {"x": x})
        assert rep.passed, rep

    def test_stop_gradient_surrogate(self, rng):
        x = rng.normal(size=(5,))
        rep = gc.grad_check(lambda ts: T.sum_(ts["x"] * T.stop_gradient(T.exp(ts["x"]))), {"x": x})
        assert rep.passed, rep


class TestRegistry:
    def test_groups(self):
        names = gc.registered()
        assert set(gc.registered("tensor")) | set(gc.registered("nn")) | set(gc.registered("model")) == set(names)
        for required in ["matmul", "layernorm", "cross_entropy", "attention_causal", "vit_block", "vq_loss",
                         "logit_laplace", "codec_loss", "prior_loss", "straight_through"]:
            assert required in names

    def test_unknown_group(self):
        with pytest.raises(KeyError):
            gc.run_checks("nope")

    @pytest.mark.parametrize("group", ["tensor", "nn", "model"])
    def test_all_registered_pass(self, group):
        reports = gc.run_checks(group, max_coords=8)
        bad = [r for r in reports if not r.passed]
        assert not bad, bad
