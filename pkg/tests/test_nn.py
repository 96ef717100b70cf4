import numpy as np
import pytest

from tempstab.errors import ConfigError, DimensionError, UsageError
from tempstab.nn import (
    AdamHyperparams,
    AdamState,
    GradientTape,
    Network,
    NetworkConfig,
    apply_update,
    backward,
    conv_forward,
    forward,
    init_network,
    load_checkpoint,
    save_checkpoint,
)

from .gradcheck import max_relative_error, numeric_param_grads

HDR = dict(downsample="maxpool", upsample="transposed", use_skip_connections=True)
COLOR = dict(downsample="strided", upsample="resize", use_skip_connections=False)


def naive_conv(x, w, b, stride=1):
    """Direct loop convolution with zero 'same' padding; x is (H, W, Cin)."""
    k = w.shape[0]
    p = k // 2
    h, wd, _ = x.shape
    xp = np.pad(x, ((p, p), (p, p), (0, 0)))
    out = np.zeros((h // stride, wd // stride, w.shape[-1]))
    for i in range(0, h, stride):
        for j in range(0, wd, stride):
            for o in range(w.shape[-1]):
                out[i // stride, j // stride, o] = np.sum(xp[i:i + k, j:j + k, :] * w[..., o]) + b[o]
    return out


def tiny(layout=HDR, widths=(3,), cin=1, cout=1, seed=0):
    cfg = NetworkConfig(input_channels=cin, output_channels=cout, encoder_widths=widths,
                        dtype="float64", **layout)
    return init_network(cfg, np.random.default_rng(seed))


def random_biases(net, seed=0):
    # zero biases put units with dead inputs exactly on the relu kink
    rng = np.random.default_rng(seed)
    for b in net.params[1::2]:
        b[...] = rng.uniform(-0.1, 0.1, size=b.shape)
    return net


class TestInit:
    def test_parameter_count_hdr_one_stage(self):
        # enc 3*3*1*4+4, bottleneck 3*3*4*4+4, tconv 2*2*4*4+4, dec 3*3*8*4+4, out 3*3*4*1+1
        net = tiny(HDR, (4,))
        assert net.num_parameters() == 40 + 148 + 68 + 292 + 37

    def test_parameter_count_color_one_stage(self):
        # enc, strided down, bottleneck, resize-conv up, dec (no skip), out
        net = tiny(COLOR, (4,))
        assert net.num_parameters() == 40 + 148 + 148 + 148 + 148 + 37

    def test_biases_zero_weights_bounded(self):
        net = tiny(HDR, (4, 8))
        for (name, wshape, _), w, b in zip(net.config.layer_shapes(), net.params[0::2],
                                            net.params[1::2]):
            assert np.all(b == 0)
            fan_in = wshape[0] * wshape[1] * wshape[2]
            assert np.abs(w).max() <= np.sqrt(6.0 / fan_in)

    def test_determinism(self):
        a, b, c = tiny(seed=1), tiny(seed=1), tiny(seed=2)
        assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
        assert not all(np.array_equal(p, q) for p, q in zip(a.params, c.params))

    @pytest.mark.parametrize("kw", [
        dict(encoder_widths=()),
        dict(kernel_size=4),
        dict(downsample="avgpool"),
        dict(upsample="bicubic"),
    ])
    def test_invalid_config(self, kw):
        with pytest.raises(ConfigError):
            NetworkConfig(**kw)


class TestForward:
    def test_conv_matches_direct_loops(self):
        rng = np.random.default_rng(0)
        x = rng.random((4, 4, 2))
        w = rng.standard_normal((3, 3, 2, 3))
        b = rng.standard_normal(3)
        out, _ = conv_forward(x[None], w, b)
        np.testing.assert_allclose(out[0], naive_conv(x, w, b), atol=1e-12)
        out2, _ = conv_forward(x[None], w, b, stride=2)
        np.testing.assert_allclose(out2[0], naive_conv(x, w, b, stride=2), atol=1e-12)

    def test_linear_stage_hand_computed(self):
        # 1x1 kernels, zero weights except a scaled identity path: out = 2 * relu(3 * x) + 0.5
        cfg = NetworkConfig(encoder_widths=(1,), kernel_size=1, use_skip_connections=False,
                            downsample="strided", upsample="resize", dtype="float64")
        net = init_network(cfg, np.random.default_rng(0))
        for p in net.params:
            p[...] = 0
        x = np.arange(16, dtype=np.float64).reshape(4, 4, 1) / 16
        net.layer("enc0")[0][...] = 3.0
        net.layer("down0")[0][...] = 1.0
        net.layer("bottleneck")[0][...] = 1.0
        net.layer("up0")[0][...] = 1.0
        net.layer("dec0")[0][...] = 1.0
        net.layer("out")[0][...] = 2.0
        net.layer("out")[1][...] = 0.5
        # strided 1x1 conv keeps the top-left pixel of each 2x2 block, resize repeats it
        sub = 3 * x[::2, ::2]
        want = 2 * np.repeat(np.repeat(sub, 2, axis=0), 2, axis=1) + 0.5
        np.testing.assert_allclose(forward(net, x), want, atol=1e-12)

    def test_zero_weights_zero_output(self):
        net = tiny(HDR, (4, 4))
        for p in net.params:
            p[...] = 0
        out = forward(net, np.random.default_rng(0).random((16, 16, 1)))
        assert np.all(out == 0)

    @pytest.mark.parametrize("layout", [HDR, COLOR])
    @pytest.mark.parametrize("widths", [(3,), (4, 6), (2, 3, 4)])
    def test_output_shape(self, layout, widths):
        net = tiny(layout, widths, cin=2, cout=3)
        x = np.random.default_rng(0).random((5, 16, 24, 2))
        assert forward(net, x).shape == (5, 16, 24, 3)
        assert forward(net, x[0]).shape == (16, 24, 3)

    def test_forward_deterministic(self):
        net = tiny(HDR, (4, 8))
        x = np.random.default_rng(0).random((2, 8, 8, 1))
        assert np.array_equal(forward(net, x), forward(net, x))

    def test_shape_errors(self):
        net = tiny(HDR, (4, 4))
        with pytest.raises(DimensionError):
            forward(net, np.zeros((6, 8, 1)))  # not divisible by 4
        with pytest.raises(DimensionError):
            forward(net, np.zeros((8, 8, 2)))  # wrong channel count


class TestBackward:
    @pytest.mark.parametrize("layout", [HDR, COLOR])
    def test_finite_differences_every_parameter(self, layout):
        net = random_biases(tiny(layout, (3,), seed=3))
        assert net.num_parameters() <= 500
        rng = np.random.default_rng(4)
        x = rng.random((2, 8, 8, 1))
        y = rng.random((2, 8, 8, 1))

        def loss(n):
            d = forward(n, x) - y
            return np.mean(d * d)

        tape = GradientTape()
        out = forward(net, x, tape)
        analytic = backward(net, tape, 2 * (out - y) / out.size)
        numeric = numeric_param_grads(net, loss)
        assert max_relative_error(analytic, numeric) < 1e-4

    def test_norm_squared_gradient(self):
        # d||f(x)||^2/dtheta via backward equals per-parameter perturbation of ||f||^2
        net = random_biases(tiny(HDR, (2, 3), seed=5), seed=1)
        x = np.random.default_rng(6).random((1, 8, 8, 1))
        tape = GradientTape()
        out = forward(net, x, tape)
        analytic = backward(net, tape, 2 * out)
        numeric = numeric_param_grads(net, lambda n: np.sum(forward(n, x) ** 2))
        assert max_relative_error(analytic, numeric) < 1e-4

    def test_zero_loss_grad(self):
        net = tiny()
        tape = GradientTape()
        out = forward(net, np.ones((8, 8, 1)), tape)
        grads = backward(net, tape, np.zeros_like(out))
        assert all(np.all(g == 0) for g in grads)

    def test_missing_tape(self):
        net = tiny()
        with pytest.raises(UsageError):
            backward(net, GradientTape(), np.zeros((8, 8, 1)))

    def test_stale_tape(self):
        net = tiny()
        tape = GradientTape()
        out = forward(net, np.ones((8, 8, 1)), tape)
        grads = backward(net, tape, np.ones_like(out))
        tape2 = GradientTape()
        forward(net, np.ones((8, 8, 1)), tape2)
        apply_update(net, grads, AdamState())
        with pytest.raises(UsageError):
            backward(net, tape2, np.ones_like(out))

    def test_tape_single_use(self):
        net = tiny()
        tape = GradientTape()
        out = forward(net, np.ones((8, 8, 1)), tape)
        backward(net, tape, np.ones_like(out))
        with pytest.raises(UsageError):
            backward(net, tape, np.ones_like(out))

    def test_wrong_gradient_shape(self):
        net = tiny()
        tape = GradientTape()
        forward(net, np.ones((8, 8, 1)), tape)
        with pytest.raises(DimensionError):
            backward(net, tape, np.ones((8, 8, 2)))


class TestAdam:
    def test_zero_gradients_no_change(self):
        net = tiny()
        before = [p.copy() for p in net.params]
        apply_update(net, [np.zeros_like(p) for p in net.params], AdamState())
        assert all(np.array_equal(a, b) for a, b in zip(before, net.params))

    def test_first_step_moves_by_lr(self):
        net = tiny()
        before = [p.copy() for p in net.params]
        hp = AdamHyperparams(lr=1e-3)
        apply_update(net, [np.ones_like(p) for p in net.params], AdamState(), hp)
        # bias-corrected m = v = 1 on step one: delta = lr / (1 + eps)
        for a, b in zip(before, net.params):
            np.testing.assert_allclose(a - b, 1e-3 / (1 + 1e-8), rtol=1e-12)

    def test_quadratic_decreases_monotonically(self):
        cfg = NetworkConfig(encoder_widths=(1,), dtype="float64")
        net = Network(cfg, [np.array([5.0])])
        state = AdamState()
        hp = AdamHyperparams(lr=0.05)
        losses = []
        for _ in range(100):
            w = net.params[0]
            losses.append(float((w[0] - 1.0) ** 2))
            apply_update(net, [2 * (w - 1.0)], state, hp)
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_deterministic(self):
        a, b = tiny(), tiny()
        g = [np.random.default_rng(0).standard_normal(p.shape) for p in a.params]
        sa, sb = AdamState(), AdamState()
        for _ in range(3):
            apply_update(a, g, sa)
            apply_update(b, g, sb)
        assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))


class TestCheckpoint:
    @pytest.mark.parametrize("dtype", ["float32", "float64"])
    def test_round_trip_bit_exact(self, tmp_path, dtype):
        cfg = NetworkConfig(encoder_widths=(3, 5), dtype=dtype, **COLOR)
        net = init_network(cfg, np.random.default_rng(0))
        for p in net.params:
            p += np.random.default_rng(1).standard_normal(p.shape).astype(dtype)
        save_checkpoint(net, tmp_path / "a.ckpt")
        back = load_checkpoint(tmp_path / "a.ckpt")
        assert back.config == cfg
        assert all(p.dtype == q.dtype and np.array_equal(p, q)
                   for p, q in zip(net.params, back.params))
        save_checkpoint(back, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_header(self, tmp_path):
        net = tiny()
        save_checkpoint(net, tmp_path / "a.ckpt")
        data = (tmp_path / "a.ckpt").read_bytes()
        assert data[:4] == b"TSNN"
        assert int.from_bytes(data[4:8], "little") == 1

    def test_rejects_garbage(self, tmp_path):
        (tmp_path / "x").write_bytes(b"nope" * 10)
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "x")
