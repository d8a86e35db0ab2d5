import numpy as np
import pytest

from graphdistill.network import (
    AdamState,
    ConvNetParams,
    adam_step,
    backward,
    forward,
    forward_with_cache,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from graphdistill.tensors import DimensionError, FormatError, normalize_pixels

from oracles import central_diff


def zero_params(width=2, embed_dim=2):
    return ConvNetParams(
        np.zeros((width, 1, 3, 3)),
        np.zeros(width),
        np.zeros((embed_dim, width, 3, 3)),
        np.zeros(embed_dim),
    )


class TestForward:
    def test_zero_net_zero_map(self):
        emap = forward(zero_params(), np.ones((1, 5, 5)))
        np.testing.assert_array_equal(emap.data, 0.0)

    def test_passthrough_conv1_bias_only_conv2(self):
        # conv1 passes the pixel through channel 0; conv2 contributes only its
        # bias, so every pixel embeds to normalize(b).
        params = zero_params(width=2, embed_dim=3)
        params.conv1_w[0, 0, 1, 1] = 1.0
        b = np.array([0.6, 0.0, 0.8])
        params.conv2_b[:] = b
        emap = forward(params, np.full((1, 4, 4), 0.5))
        expected = b / np.linalg.norm(b)
        for r in range(4):
            for c in range(4):
                np.testing.assert_allclose(emap.data[:, r, c], expected, atol=1e-12)

    def test_translation_equivariance_on_interior(self):
        rng = np.random.default_rng(44)
        params = init_params(3, 4, rng)
        canvas = rng.uniform(size=(16, 16))
        a = forward(params, canvas[None, 2:10, 2:10]).data
        b = forward(params, canvas[None, 4:12, 5:13]).data
        # interior pixels whose 5x5 receptive fields see identical content
        np.testing.assert_allclose(a[:, 4:6, 5:6], b[:, 2:4, 2:3], atol=1e-10)

    def test_unit_norm_output(self):
        rng = np.random.default_rng(45)
        params = init_params(4, 8, rng)
        emap = forward(params, rng.uniform(size=(1, 6, 6)))
        norms = np.linalg.norm(emap.data, axis=0)
        np.testing.assert_allclose(norms, 1.0, atol=1e-9)

    def test_rejects_tiny_image(self):
        with pytest.raises(DimensionError):
            forward(zero_params(), np.ones((1, 2, 2)))


class TestBackward:
    def test_zero_cotangent_zero_grads(self):
        rng = np.random.default_rng(46)
        params = init_params(2, 2, rng)
        grads = backward(params, rng.uniform(size=(1, 5, 5)), np.zeros((2, 5, 5)))
        for g in grads.values():
            np.testing.assert_array_equal(g, 0.0)

    def test_matches_finite_differences_everywhere(self):
        rng = np.random.default_rng(47)
        params = init_params(2, 2, rng)
        image = rng.uniform(size=(1, 5, 5))
        cotangent = rng.normal(size=(2, 5, 5))
        grads = backward(params, image, cotangent)
        names = list(params.as_dict())
        x0 = np.concatenate([params.as_dict()[n].reshape(-1) for n in names])
        sizes = [params.as_dict()[n].size for n in names]

        def loss_of(flat):
            arrays, pos = [], 0
            for n, s in zip(names, sizes):
                arrays.append(flat[pos : pos + s].reshape(params.as_dict()[n].shape))
                pos += s
            out, _ = forward_with_cache(ConvNetParams(*arrays), image)
            return float(np.sum(out * cotangent))

        fd = central_diff(loss_of, x0)
        analytic = np.concatenate([grads[n].reshape(-1) for n in names])
        scale = max(np.abs(fd).max(), np.abs(analytic).max())
        assert np.abs(analytic - fd).max() / scale < 1e-4

    def test_dead_relu_channel_gets_zero_weight_grad(self):
        rng = np.random.default_rng(48)
        params = init_params(2, 2, rng)
        params.conv1_b[0] = -100.0  # channel 0 pre-activations always < 0
        image = rng.uniform(size=(1, 5, 5))
        grads = backward(params, image, rng.normal(size=(2, 5, 5)))
        np.testing.assert_array_equal(grads["conv1_w"][0], 0.0)
        assert grads["conv1_b"][0] == 0.0


class TestAdam:
    def test_zero_gradient_no_motion(self):
        rng = np.random.default_rng(49)
        params = init_params(2, 2, rng)
        before = params.copy()
        grads = {n: np.zeros_like(p) for n, p in params.as_dict().items()}
        adam_step(params, grads, AdamState(params), 1e-4, 0.9, 0.99, 1e-8)
        for n in params.as_dict():
            np.testing.assert_array_equal(
                params.as_dict()[n], before.as_dict()[n]
            )

    def test_first_step_magnitude_is_learning_rate(self):
        # bias-corrected first step: -lr * g / (|g| + eps), magnitude ~ lr
        rng = np.random.default_rng(50)
        params = init_params(2, 2, rng)
        before = params.copy()
        grads = {n: rng.normal(size=p.shape) for n, p in params.as_dict().items()}
        lr = 1e-4
        adam_step(params, grads, AdamState(params), lr, 0.9, 0.99, 1e-8)
        for n, g in grads.items():
            step = params.as_dict()[n] - before.as_dict()[n]
            expected = -lr * g / (np.abs(g) + 1e-8)
            np.testing.assert_allclose(step, expected, atol=1e-12)

    def test_two_identical_steps_monotone(self):
        rng = np.random.default_rng(51)
        params = init_params(2, 2, rng)
        state = AdamState(params)
        grads = {n: rng.normal(size=p.shape) for n, p in params.as_dict().items()}
        p0 = params.copy()
        adam_step(params, grads, state, 1e-3, 0.9, 0.99, 1e-8)
        p1 = params.copy()
        adam_step(params, grads, state, 1e-3, 0.9, 0.99, 1e-8)
        for n, g in grads.items():
            d1 = p1.as_dict()[n] - p0.as_dict()[n]
            d2 = params.as_dict()[n] - p1.as_dict()[n]
            moving = np.abs(g) > 1e-12
            assert np.all(np.sign(d1[moving]) == -np.sign(g[moving]))
            assert np.all(np.sign(d2[moving]) == -np.sign(g[moving]))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(52)
        params = init_params(3, 4, rng)
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, params)
        loaded = load_checkpoint(path)
        assert loaded.width == 3 and loaded.embed_dim == 4
        for n in params.as_dict():
            np.testing.assert_allclose(
                loaded.as_dict()[n],
                params.as_dict()[n].astype(np.float32),
                atol=0.0,
            )

    def test_truncated_file(self, tmp_path):
        rng = np.random.default_rng(53)
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, init_params(2, 2, rng))
        path.write_bytes(path.read_bytes()[:-7])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_normalize_pixels_helper_matches_forward_tail(self):
        rng = np.random.default_rng(54)
        pre = rng.normal(size=(3, 4, 4))
        unit = normalize_pixels(pre)
        norms = np.linalg.norm(unit, axis=0)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)
