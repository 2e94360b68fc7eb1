import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from occlumesh.body_model import forward_mesh, project, regress_joints
from occlumesh.config import ModelConfig
from occlumesh.diffcore import Tensor, archive, grad_check, ops
from occlumesh.extractor import ConfigError
from occlumesh.fusion import (FusionConfig, FusionTransformer, attention_mass_split, contribution_mask,
                              decode_pose_latent, export_attention, sample_uniform, trilinear_sample)
from occlumesh.lifting import psi
from occlumesh.model import OccluMeshNet
from occlumesh.transformer import MultiHeadAttention, attention

import oracles
from conftest import zero_params

RESIDUALS = ("pose_res", "shape_res", "cam_res", "joint_res")


def small_fusion(rng, **kw):
    base = dict(C=8, D=2, H=2, W=2, heads=2, ffn=16, refine_layers=2, num_joints=4)
    base.update(kw)
    return FusionTransformer(FusionConfig(**base), rng, np.float64)


# ------------------------------------------------------------------ attention

def test_attention_single_key_returns_value(rng):
    v = rng.normal(size=(1, 4))
    out = attention(rng.normal(size=(3, 4)), rng.normal(size=(1, 4)), v).data
    np.testing.assert_allclose(out, np.repeat(v, 3, 0), atol=1e-15)


def test_attention_duplicate_keys_average_values(rng):
    k = np.repeat(rng.normal(size=(1, 4)), 2, 0)
    v = rng.normal(size=(2, 4))
    out = attention(rng.normal(size=(2, 4)), k, v).data
    np.testing.assert_allclose(out, np.repeat(v.mean(0, keepdims=True), 2, 0), atol=1e-15)


@pytest.mark.parametrize("heads", [1, 2])
def test_attention_matches_direct_oracle(rng, heads):
    q, k, v = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    np.testing.assert_allclose(attention(q, k, v, heads).data, oracles.attention(q, k, v, heads), atol=1e-10, rtol=0)


def test_attention_rejects_bad_heads(rng):
    with pytest.raises(ConfigError):
        attention(np.ones((2, 6)), np.ones((2, 6)), np.ones((2, 6)), heads=4)
    with pytest.raises(ConfigError):
        MultiHeadAttention(6, 4, rng)


def test_single_key_cross_attention_is_value_projection(rng):
    a = MultiHeadAttention(4, 2, rng, np.float64)
    mem = rng.normal(size=(1, 1, 4))
    out = a(rng.normal(size=(1, 3, 4)), mem, mem).data[0]
    ref = oracles.linear(a.wo, oracles.linear(a.wv, mem[0]))
    np.testing.assert_allclose(out, np.repeat(ref, 3, 0), atol=1e-12)


# ------------------------------------------------------------------ 2D encoder

def test_encode2d_shape_identity_and_oracle(rng):
    fus = small_fusion(rng, H=1, W=2)
    f = rng.normal(size=(1, 8, 1, 2))
    out = fus.encode2d(Tensor(f)).data
    assert out.shape == f.shape
    ref = oracles.encoder_layer(fus.encoder2d.layers[0], f[0].reshape(8, 2).T, fus.encoder2d.pos.data)
    np.testing.assert_allclose(out[0].reshape(8, 2).T, ref, atol=1e-10)
    zero_params(fus.encoder2d, "attn", "mlp")
    np.testing.assert_array_equal(fus.encode2d(Tensor(f)).data, f)


# ------------------------------------------------------------------ trilinear sampling

def test_trilinear_at_centres_and_midpoints(rng):
    g = rng.normal(size=(1, 3, 2, 3, 4))
    D, H, W = 2, 3, 4
    pts = np.array([[(x + 0.5) / W, (y + 0.5) / H, (z + 0.5) / D]
                    for z in range(D) for y in range(H) for x in range(W)])
    out = sample_uniform(g, pts[None]).data[0]
    np.testing.assert_array_equal(out, g[0].reshape(3, -1).T)
    mid = np.array([[[1.0 / W, 0.5 / H, 0.5 / D]]])          # between x=0 and x=1
    np.testing.assert_allclose(sample_uniform(g, mid).data[0, 0], g[0, :, 0, 0, :2].mean(-1), atol=1e-15)


def test_trilinear_matches_eight_term_oracle(rng):
    for _ in range(10):
        g = rng.normal(size=(1, 5, 2, 2, 2))
        j = rng.uniform(size=(1, 3, 3))
        lam = rng.uniform(1.0, 4.0)
        got = trilinear_sample(Tensor(g), j, Tensor(np.array([lam]))).data[0]
        for n in range(3):
            p = j[0, n].copy()
            p[2] = p[2] ** lam
            np.testing.assert_allclose(got[n], oracles.trilinear(g[0], p), atol=1e-12, rtol=0)


def test_trilinear_clamps_outside_border(rng):
    g = rng.normal(size=(1, 2, 3, 3, 3))
    corner = sample_uniform(g, np.array([[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]])).data[0]
    np.testing.assert_array_equal(corner[0], g[0, :, 0, 0, 0])
    np.testing.assert_array_equal(corner[1], g[0, :, 2, 2, 2])


@given(hnp.arrays(np.float64, 3, elements=st.floats(0, 1)), st.floats(0, 1), st.floats(0, 1),
       st.integers(0, 2), st.integers(0, 2 ** 16))
def test_trilinear_piecewise_linear_within_a_cell(offset, other, t, axis, seed):
    """Multilinear: exactly linear along any axis-aligned segment inside one cell."""
    r = np.random.default_rng(seed)
    g = r.normal(size=(1, 2, 3, 3, 3))
    cell = r.integers(0, 2, size=3)
    a = (cell + 0.5 + offset) / 3
    b = a.copy()
    b[axis] = (cell[axis] + 0.5 + other) / 3
    mix = sample_uniform(g, (t * a + (1 - t) * b)[None, None]).data
    sa, sb = sample_uniform(g, a[None, None]).data, sample_uniform(g, b[None, None]).data
    np.testing.assert_allclose(mix, t * sa + (1 - t) * sb, atol=1e-10)


def test_trilinear_gradients_grid_points_lambda(rng):
    j = rng.uniform(0.2, 0.8, size=(1, 3, 3))
    rep = grad_check(lambda g, p, l: trilinear_sample(g, p, l), [rng.normal(size=(1, 2, 2, 3, 2)), j, np.array([2.2])])
    assert rep.passed, rep.max_rel_error


def test_contribution_mask_counts():
    j = np.tile([[0.25, 0.25, 0.25]], (1, 17, 1))
    m = contribution_mask(j, (2, 2, 2), 1.0)
    assert m.sum() == 1 and m[0, 0, 0, 0]
    m = contribution_mask(np.array([[[0.5, 0.5, 0.5]]]), (2, 2, 2), 1.0)
    assert m.sum() == 8


# ------------------------------------------------------------------ regression and refinement

def test_zero_heads_give_default_outputs(rng):
    fus = small_fusion(rng)
    zero_params(fus, "pose_head", "shape_head", "cam_head", "joint_head", "pose_bias")
    st0 = fus(Tensor(rng.normal(size=(2, 8, 2, 2))), Tensor(rng.normal(size=(2, 8, 2, 2, 2))), Tensor(np.array([3.0])))[0]
    assert not st0.theta.data.any() and not st0.beta.data.any()
    np.testing.assert_array_equal(st0.cam.data, np.tile([1.0, 0, 0], (2, 1)))
    np.testing.assert_array_equal(st0.joints.data, 0.5)


def test_query_permutation_permutes_joints(rng):
    fus = small_fusion(rng)
    mem = Tensor(rng.normal(size=(1, 4, 8)))
    base = fus.initial_regress(mem)
    perm = np.array([2, 0, 3, 1])
    fus.queries.data[3:] = fus.queries.data[3:][perm]
    moved = fus.initial_regress(mem)
    np.testing.assert_allclose(moved.joints.data[0], base.joints.data[0][perm], atol=1e-12)
    np.testing.assert_allclose(moved.beta.data, base.beta.data, atol=1e-12)


def test_zero_residuals_keep_initial_regression(rng):
    fus = small_fusion(rng, refine_layers=3)
    zero_params(fus, *RESIDUALS)
    stages = fus(Tensor(rng.normal(size=(1, 8, 2, 2))), Tensor(rng.normal(size=(1, 8, 2, 2, 2))), Tensor(np.array([3.0])))
    assert len(stages) == 4
    for s in stages[1:]:
        for name in ("pose_latent", "theta", "beta", "cam_raw", "joints"):
            np.testing.assert_array_equal(getattr(s, name).data, getattr(stages[0], name).data)


def test_one_layer_one_key_refine_matches_oracle(rng):
    fus = small_fusion(rng, H=1, W=1, num_joints=1, smpl_token=False, feat3d_mode="none", refine_layers=1)
    mem = Tensor(rng.normal(size=(1, 1, 8)))
    pos = fus.encoder2d.pos
    s0 = fus.initial_regress(mem, pos)
    s1 = fus.refine(s0, mem, pos, None, None)[1]
    tgt = oracles.decoder_layer(fus.refiners[0], s0.hidden.data[0], mem.data[0], pos.data)
    cat = lambda a: np.concatenate([a.data[0], tgt[0]], -1)     # pooled hidden of the single token
    np.testing.assert_allclose(s1.hidden.data[0], tgt, atol=1e-12)
    np.testing.assert_allclose(s1.beta.data[0], s0.beta.data[0] + oracles.mlp(fus.shape_res[0], cat(s0.beta)), atol=1e-12)
    lat = s0.pose_latent.data[0] + oracles.mlp(fus.pose_res[0], cat(s0.pose_latent))
    np.testing.assert_allclose(s1.theta.data[0], lat @ fus.pose_weight.data + fus.pose_bias.data, atol=1e-12)
    cam = s0.cam_raw.data[0] + oracles.mlp(fus.cam_res[0], cat(s0.cam_raw))
    np.testing.assert_allclose(s1.cam_raw.data[0], cam, atol=1e-12)
    jt = s0.joints.data[0]
    j = np.clip(jt + oracles.mlp(fus.joint_res[0], np.concatenate([jt, tgt], -1)), 0, 1)
    np.testing.assert_allclose(s1.joints.data[0], j, atol=1e-12)


def test_refine_samples_joints_into_memory(rng):
    """The 3D keys seen by a refining layer are the features at the current joints."""
    fus = small_fusion(rng, refine_layers=1)
    fus.keep_attention(True)
    stages = fus(Tensor(rng.normal(size=(1, 8, 2, 2))), Tensor(rng.normal(size=(1, 8, 2, 2, 2))), Tensor(np.array([3.0])))
    w = fus.attention_maps()[0]
    assert w.shape == (1, 3 + 4, 4 + 4)
    np.testing.assert_allclose(w.sum(-1), 1, atol=1e-12)
    assert len(stages) == 2


def test_sampling_mode_and_pooled_smpl(rng):
    fus = small_fusion(rng, feat2d_mode="sampling", smpl_token=False)
    j2d = rng.uniform(-1, 1, size=(2, 4, 2))
    stages = fus(Tensor(rng.normal(size=(2, 8, 2, 2))), Tensor(rng.normal(size=(2, 8, 2, 2, 2))),
                 Tensor(np.array([3.0])), j2d)
    assert stages[-1].theta.shape == (2, 72) and stages[-1].joints.shape == (2, 4, 3)
    with pytest.raises(ValueError):
        fus(Tensor(rng.normal(size=(2, 8, 2, 2))), None, None)


def test_fusion_end_to_end_gradients(rng):
    fus = small_fusion(rng, refine_layers=1)

    def fn(f2d, h3d, lam):
        s = fus(f2d, h3d, lam)[-1]
        return ops.concat([ops.reshape(s.joints, (1, -1)), s.theta, s.beta, s.cam], axis=-1)
    rep = grad_check(fn, [rng.normal(size=(1, 8, 2, 2)), rng.normal(size=(1, 8, 2, 2, 2)), np.array([2.5])])
    assert rep.passed, rep.max_rel_error


def test_decode_pose_latent_cases(rng, asset3):
    w = rng.normal(size=(32, 72))
    assert not decode_pose_latent(np.zeros((1, 32)), w, np.zeros(72)).data.any()
    pad = np.eye(32, 72)
    lat = rng.normal(size=(1, 32))
    np.testing.assert_array_equal(decode_pose_latent(lat, pad).data, np.pad(lat, ((0, 0), (0, 40))))
    w = rng.normal(scale=0.1, size=(32, 72))

    def path(latent):
        theta = decode_pose_latent(latent, w)
        j = regress_joints(forward_mesh(theta, np.zeros((1, 10)), asset3), asset3.J_regressor_eval)
        return project(j, np.array([[1.0, 0.0, 0.0]]))
    assert grad_check(path, [rng.normal(scale=0.3, size=(1, 32))]).passed


# ------------------------------------------------------------------ attention export

def test_uniform_mass_split_arithmetic():
    m2, m3 = attention_mass_split(np.full((20, 81), 1 / 81), 64)
    assert round(m2, 3) == 0.790 and round(m3, 3) == 0.210


def test_export_attention_uniform_and_round_trip(rng, tmp_path):
    cfg = ModelConfig(S=32, C=8, D=2, H=8, W=8, heads=2, ffn=16)
    net = OccluMeshNet(cfg, rng)
    for layer in net.fusion.refiners:
        zero_params(layer.cross_attn, "wq", "wk")
    image = rng.uniform(size=(1, 3, 32, 32)).astype(np.float32)
    heat = rng.uniform(size=(1, 17, 32, 32)).astype(np.float32)
    exp = export_attention(net, image, heat, path=tmp_path / "attn.jtrk")
    assert len(exp.maps) == cfg.refine_layers and exp.maps[0].shape == (20, 81)
    for m, a, b in zip(exp.maps, exp.mass_2d, exp.mass_3d):
        np.testing.assert_allclose(m.sum(-1), 1, atol=1e-6)
        assert a == pytest.approx(64 / 81, abs=1e-6) and b == pytest.approx(17 / 81, abs=1e-6)
    back = archive.load(tmp_path / "attn.jtrk")
    assert list(back) == [f"layer{l}.attn" for l in range(3)]
    for l, m in enumerate(exp.maps):
        assert back[f"layer{l}.attn"].tobytes() == m.tobytes()
    assert net.fusion.attention_maps()[0] is not None
    assert not net.fusion.refiners[0].cross_attn.keep_weights


def test_psi_used_for_sampling_depth(rng):
    g = rng.normal(size=(1, 2, 4, 1, 1))
    j = np.array([[[0.5, 0.5, 0.8]]])
    got = trilinear_sample(Tensor(g), j, Tensor(np.array([2.0]))).data
    ref = sample_uniform(g, np.array([[[0.5, 0.5, psi(0.8, 2.0).item()]]])).data
    np.testing.assert_array_equal(got, ref)
