import numpy as np
import pytest

from kpreward import net
from kpreward.net import (Adam, CheckpointError, Unet, load_checkpoint, parameter_count, read_tensors,
                          save_checkpoint, write_tensors)
from kpreward.training import masked_loss

from . import oracles
from .gradcheck import numeric_grad, rel_err, unet_masked_loss_check

TOY = (2, 4, 8, 16)


def toy_model(seed=0, channels=TOY):
    return Unet(channels, np.random.default_rng(seed))


def randomize_buffers(model, rng):
    for k in model.buffers:
        if k.endswith(".mean"):
            model.buffers[k] = rng.normal(0, 0.3, model.buffers[k].shape)
        else:
            model.buffers[k] = rng.uniform(0.5, 2.0, model.buffers[k].shape)
    for k in model.params:
        if k.endswith(".gamma") or k.endswith(".beta") or k == "head.b":
            model.params[k] = rng.normal(0.5 if k.endswith(".gamma") else 0.0, 0.3, model.params[k].shape)


class TestForward:
    def test_shape_and_range(self, textured):
        x = np.stack([textured(32, 16, s) for s in range(3)])[:, None]
        s, _ = toy_model().forward(x)
        assert s.shape == (3, 1, 16, 32)
        assert np.all((s > 0) & (s < 1))

    def test_zero_weights_give_half(self):
        m = toy_model()
        for k in m.params:
            m.params[k][...] = 0.0
        s, _ = m.forward(np.random.default_rng(0).random((2, 1, 16, 16)))
        np.testing.assert_array_equal(s, 0.5)

    def test_eval_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        m = toy_model(3)
        randomize_buffers(m, rng)
        x = rng.random((2, 1, 16, 16))
        s, _ = m.forward(x, train=False)
        np.testing.assert_allclose(s, oracles.unet_eval(m.params, m.buffers, TOY, x), rtol=1e-10, atol=1e-12)

    def test_eval_deterministic_and_leaves_buffers(self):
        m = toy_model()
        before = {k: v.copy() for k, v in m.buffers.items()}
        x = np.random.default_rng(1).random((1, 1, 32, 32))
        a, _ = m.forward(x)
        b, _ = m.forward(x)
        assert a.tobytes() == b.tobytes()
        for k in before:
            np.testing.assert_array_equal(m.buffers[k], before[k])

    def test_bad_input_dims(self):
        with pytest.raises(ValueError, match="divisible"):
            toy_model().forward(np.zeros((1, 1, 20, 16)))
        with pytest.raises(ValueError, match="shape"):
            toy_model().forward(np.zeros((1, 16, 16)))

    def test_score_map_any_size(self, textured):
        m = toy_model()
        img = textured(37, 21, 2)
        s = m.score_map(img)
        assert s.shape == (21, 37)
        assert np.all((s > 0) & (s < 1))

    def test_default_parameter_count(self):
        assert parameter_count() == 540_929
        assert Unet().num_parameters() == net.DEFAULT_PARAMETER_COUNT

    def test_bad_channel_plan(self):
        with pytest.raises(ValueError):
            Unet((2, 4, 8))
        with pytest.raises(ValueError):
            Unet((0, 4, 8, 16))


class TestRunningStats:
    def test_running_mean_converges_geometrically(self):
        x = np.random.default_rng(0).normal(2.0, 1.0, (4, 3, 8, 8))
        gamma, beta = np.ones(3), np.zeros(3)
        rm, rv = np.zeros(3), np.ones(3)
        batch_mean = x.mean(axis=(0, 2, 3))
        for k in range(1, 11):
            net.batchnorm_forward(x, gamma, beta, rm, rv, train=True)
            np.testing.assert_allclose(rm, (1 - 0.9**k) * batch_mean, rtol=1e-12)

    def test_train_forward_updates_buffers(self):
        m = toy_model()
        m.forward(np.random.default_rng(0).random((2, 1, 16, 16)), train=True)
        assert np.any(m.buffers["enc0.0.mean"] != 0)


class TestLayerGradients:
    """Central differences at delta 1e-3 on each layer with a random linear loss."""

    def check(self, f, x, grad, rng, n=12, tol=1e-6):
        for _ in range(n):
            idx = tuple(int(rng.integers(0, d)) for d in x.shape)
            assert rel_err(grad[idx], numeric_grad(f, x, idx, 1e-3)) < tol

    def test_conv3x3(self):
        rng = np.random.default_rng(0)
        x, w = rng.normal(size=(2, 3, 6, 5)), rng.normal(size=(4, 3, 3, 3))
        g = rng.normal(size=(2, 4, 6, 5))
        dx, dw = net.conv3x3_backward(g, net.conv3x3_forward(x, w)[1])
        self.check(lambda: (net.conv3x3_forward(x, w)[0] * g).sum(), x, dx, rng)
        self.check(lambda: (net.conv3x3_forward(x, w)[0] * g).sum(), w, dw, rng)

    def test_conv3x3_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        x, w = rng.normal(size=(1, 2, 5, 4)), rng.normal(size=(3, 2, 3, 3))
        np.testing.assert_allclose(net.conv3x3_forward(x, w)[0], oracles.conv3x3(x, w), atol=1e-12)

    def test_conv1x1(self):
        rng = np.random.default_rng(2)
        x, w, b = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 1, 1)), rng.normal(size=2)
        g = rng.normal(size=(2, 2, 4, 4))
        f = lambda: (net.conv1x1_forward(x, w, b)[0] * g).sum()  # noqa: E731
        dx, dw, db = net.conv1x1_backward(g, net.conv1x1_forward(x, w, b)[1])
        self.check(f, x, dx, rng)
        self.check(f, w, dw, rng)
        self.check(f, b, db, rng)

    def test_batchnorm_train(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(3, 2, 4, 4))
        gamma, beta = rng.normal(size=2), rng.normal(size=2)
        g = rng.normal(size=x.shape)

        def f():
            return (net.batchnorm_forward(x, gamma, beta, np.zeros(2), np.ones(2), True)[0] * g).sum()

        dx, dgamma, dbeta = net.batchnorm_backward(g, net.batchnorm_forward(x, gamma, beta, np.zeros(2),
                                                                            np.ones(2), True)[1])
        self.check(f, x, dx, rng)
        self.check(f, gamma, dgamma, rng, n=2)
        self.check(f, beta, dbeta, rng, n=2)

    def test_maxpool_and_upsample(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 2, 6, 4))
        y, cache = net.maxpool2_forward(x)
        np.testing.assert_array_equal(y, oracles.maxpool2(x))
        g = rng.normal(size=y.shape)
        self.check(lambda: (net.maxpool2_forward(x)[0] * g).sum(), x, net.maxpool2_backward(g, cache), rng)
        gu = rng.normal(size=(2, 2, 12, 8))
        self.check(lambda: (net.upsample2_forward(x) * gu).sum(), x, net.upsample2_backward(gu), rng)

    def test_sigmoid_extremes(self):
        s = net.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
        np.testing.assert_array_equal(s, [0.0, 0.5, 1.0])


class TestBackward:
    def setup(self, seed=0):
        rng = np.random.default_rng(seed)
        m = toy_model(seed)
        x = rng.random((2, 1, 16, 16))
        s, cache = m.forward(x, train=True)
        return m, cache, rng

    def test_zero_upstream_zero_grads(self):
        m, cache, _ = self.setup()
        grads = m.backward(cache, np.zeros_like(cache["s"]))
        assert set(grads) == set(m.params)
        assert all(not np.any(g) for g in grads.values())

    def test_linear_in_upstream(self):
        m, cache, rng = self.setup(1)
        ds = rng.normal(size=cache["s"].shape)
        g1, g2 = m.backward(cache, ds), m.backward(cache, 2 * ds)
        for k in g1:
            np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-12, atol=1e-300)

    def test_shape_mismatch(self):
        m, cache, _ = self.setup()
        with pytest.raises(ValueError):
            m.backward(cache, np.zeros((1, 1, 4, 4)))

    @pytest.mark.parametrize("seed", range(3))
    def test_frozen_pattern_masked_loss(self, seed):
        assert unet_masked_loss_check(seed, per_tensor=2) < 1e-4

    @pytest.mark.xfail(strict=True, reason="at delta 1e-3 ReLU kinks and batch-norm curvature exceed 1e-4")
    def test_unfrozen_whole_network_coarse_delta(self):
        rng = np.random.default_rng(0)
        m = toy_model(0)
        x = rng.random((8, 1, 16, 16))
        r = (rng.random(x.shape) < 0.5).astype(float)
        mk = (rng.random(x.shape) < 0.3).astype(float)
        s, cache = m.copy().forward(x, train=True)
        grads = m.backward(cache, masked_loss(s, r, mk)[1])

        def f():
            return masked_loss(m.copy().forward(x, train=True)[0], r, mk)[0]

        worst = 0.0
        for name, p in m.params.items():
            for _ in range(3):
                idx = tuple(int(rng.integers(0, d)) for d in p.shape)
                worst = max(worst, rel_err(grads[name][idx], numeric_grad(f, p, idx, 1e-3)))
        assert worst < 1e-4


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = {"a": np.array([1.0, -2.0])}
        opt = Adam()
        for _ in range(5):
            opt.step(p, {"a": np.zeros(2)})
        np.testing.assert_array_equal(p["a"], [1.0, -2.0])

    def test_first_step_is_lr_sized(self):
        p = {"a": np.zeros(3)}
        Adam(lr=1e-3).step(p, {"a": np.array([0.5, -7.0, 1e3])})
        np.testing.assert_allclose(p["a"], [-1e-3, 1e-3, -1e-3], rtol=1e-6)

    def test_trajectory_matches_scalar_oracle(self):
        gs = [0.3, -1.2, 0.05, 2.0, -0.7]
        p = {"a": np.array([0.25])}
        opt = Adam(lr=0.01)
        traj = []
        for g in gs:
            opt.step(p, {"a": np.array([g])})
            traj.append(p["a"][0])
        np.testing.assert_allclose(traj, oracles.adam_scalar(gs, lr=0.01, p0=0.25), rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            Adam().step({"a": np.zeros(2)}, {"a": np.zeros(3)})


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = toy_model(5)
        m.forward(np.random.default_rng(0).random((1, 1, 16, 16)), train=True)
        opt = Adam(lr=3e-4)
        opt.step(m.params, {k: np.ones_like(v) for k, v in m.params.items()})
        save_checkpoint(tmp_path / "c.glam", m, opt, extra={"step": 7})
        m2, opt2, extra = load_checkpoint(tmp_path / "c.glam")
        assert m2.channels == TOY
        for k in m.params:
            assert m2.params[k].tobytes() == m.params[k].tobytes()
        for k in m.buffers:
            assert m2.buffers[k].tobytes() == m.buffers[k].tobytes()
        assert (opt2.lr, opt2.t) == (3e-4, 1)
        assert opt2.m.keys() == opt.m.keys()
        assert extra["step"][0] == 7

    def test_without_optimizer(self, tmp_path):
        save_checkpoint(tmp_path / "c.glam", toy_model())
        assert load_checkpoint(tmp_path / "c.glam")[1] is None

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.glam").write_bytes(b"NOPE\x01\x00\x00\x00")
        with pytest.raises(CheckpointError, match="magic"):
            read_tensors(tmp_path / "x.glam")

    def test_truncated(self, tmp_path):
        write_tensors(tmp_path / "t.glam", {"a": np.arange(6.0).reshape(2, 3)})
        raw = (tmp_path / "t.glam").read_bytes()
        (tmp_path / "t.glam").write_bytes(raw[:-5])
        with pytest.raises(CheckpointError, match="truncated"):
            read_tensors(tmp_path / "t.glam")

    def test_missing_tensor(self, tmp_path):
        write_tensors(tmp_path / "p.glam", {"meta.channels": np.array(TOY, dtype=float)})
        with pytest.raises(CheckpointError, match="missing"):
            load_checkpoint(tmp_path / "p.glam")
