import numpy as np
import pytest

from occlumesh.diffcore import Tensor, grad_check
from occlumesh.extractor import (ConfigError, ConvBlockSpec, Extractor, ExtractorConfig, conv, make_heatmaps,
                                 norm_to_pixel, pixel_to_norm)


def test_pixel_norm_round_trip():
    px = np.array([[0.0, 0.0], [63.0, 17.0]])
    np.testing.assert_allclose(norm_to_pixel(pixel_to_norm(px, 64), 64), px, atol=1e-12)
    np.testing.assert_allclose(pixel_to_norm(np.array([0.0, 63.0]), 64), [-1 + 1 / 64, 1 - 1 / 64])


def test_heatmap_peak_at_pixel_centre():
    S = 16
    j = pixel_to_norm(np.array([[5.0, 9.0]]), S)          # col 5, row 9
    m = make_heatmaps(j, S, 1.5)[0]
    assert np.unravel_index(m.argmax(), m.shape) == (9, 5)
    assert m.max() == pytest.approx(1.0) and m.min() >= 0


def test_heatmap_out_of_frame_and_wide_sigma():
    S = 16
    assert not make_heatmaps(np.array([[-10.0, -10.0]]), S, 2.0).any()
    m = make_heatmaps(np.array([[0.1, -0.3]]), S, 100.0 * S)[0]
    assert m.max() / m.min() < 1.01
    with pytest.raises(ValueError):
        make_heatmaps(np.zeros((1, 2)), S, 0.0)


def test_default_config_shapes(rng):
    cfg = ExtractorConfig.default(S=64, H=8, C=256)
    assert [b.stride for b in cfg.blocks] == [2, 2, 2]
    ex = Extractor(cfg, rng)
    out = ex(np.zeros((1, 3, 64, 64), np.float32), np.zeros((1, 17, 64, 64), np.float32))
    assert out.shape == (1, 256, 8, 8)
    assert not out.data.any()                     # zero input, zero biases


def test_bad_sizes_rejected():
    with pytest.raises(ConfigError):
        ExtractorConfig.default(S=60, H=8)
    with pytest.raises(ConfigError):
        ExtractorConfig.default(S=48, H=8)


def test_one_by_one_identity_kernel(rng):
    """A 1x1 conv is a per-pixel channel projection; identity weights copy input."""
    cfg = ExtractorConfig(in_channels=4, blocks=[ConvBlockSpec(4, kernel=1, stride=1, padding=0)], out_size=4)
    ex = Extractor(cfg, rng, np.float64)
    ex.weights[0].data = np.eye(4).reshape(4, 4, 1, 1)
    x = rng.normal(size=(2, 4, 4, 4))
    np.testing.assert_array_equal(ex.forward_input(x).data, x)
    P = rng.normal(size=(3, 4))
    y = conv(x, P.reshape(3, 4, 1, 1)).data
    np.testing.assert_allclose(y, np.einsum("oc,bchw->bohw", P, x), atol=1e-12)


def test_conv_matches_direct_loops(rng):
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    got = conv(x, w, b, stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                ref[0, o, i, j] = (xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_translation_covariance_without_padding(rng):
    cfg = ExtractorConfig(in_channels=3, blocks=[ConvBlockSpec(4, 3, 2, 0), ConvBlockSpec(5, 3, 1, 0)])
    ex = Extractor(cfg, rng, np.float64)
    x = rng.normal(size=(1, 3, 16, 16))
    shifted = np.roll(x, 2, axis=3)                # one stride unit to the right
    a, b = ex.forward_input(x).data, ex.forward_input(shifted).data
    np.testing.assert_allclose(b[..., 2:], a[..., 1:-1], atol=1e-12)


def test_extract_gradients_one_block(rng):
    cfg = ExtractorConfig(in_channels=3, blocks=[ConvBlockSpec(2, 3, 2, 1)])
    ex = Extractor(cfg, rng, np.float64)
    x = rng.normal(size=(1, 3, 4, 4))

    def f(x, w, b):
        ex.weights[0], ex.biases[0] = w, b
        return ex.forward_input(x)
    w0, b0 = ex.weights[0].data.copy(), rng.normal(size=2)
    rep = grad_check(f, [x, w0, b0])
    assert rep.passed, rep.max_rel_error


def test_conv3d_gradients(rng):
    rep = grad_check(lambda x, w, b: conv(x, w, b, 1, 1), [rng.normal(size=(1, 2, 3, 3, 3)),
                                                           rng.normal(size=(2, 2, 3, 3, 3)), rng.normal(size=2)])
    assert rep.passed, rep.max_rel_error


def test_channel_mismatch_rejected(rng):
    ex = Extractor(ExtractorConfig.default(S=16, H=8, C=8, num_joints=2), rng)
    with pytest.raises(ConfigError):
        ex.forward_input(Tensor(np.zeros((1, 4, 16, 16), np.float32)))
