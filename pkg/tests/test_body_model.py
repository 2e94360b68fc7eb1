import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp
from scipy.spatial.transform import Rotation

from occlumesh.body_model import (JOINT_NAMES, NUM_JOINTS, BodyModelAsset, BodyParams, JointSet, forward_mesh,
                                  load_asset, project, regress_joints, rodrigues, toy_asset)
from occlumesh.diffcore import ShapeError, grad_check

aa_vectors = hnp.arrays(np.float64, 3, elements=st.floats(-3.0, 3.0))


def chain_oracle(asset: BodyModelAsset, pose, shape):
    """Per-vertex blend of explicit 4x4 world transforms built joint by joint."""
    K = asset.num_joints
    v = asset.template + np.tensordot(shape, asset.shapedirs, axes=1)
    J = asset.J_regressor_model @ v
    world = []
    for k in range(K):
        local = np.eye(4)
        local[:3, :3] = Rotation.from_rotvec(pose[3 * k:3 * k + 3]).as_matrix()
        p = asset.parents[k]
        local[:3, 3] = J[k] - (J[p] if p >= 0 else 0)
        world.append(local if p < 0 else world[p] @ local)
    out = np.zeros_like(v)
    for i in range(len(v)):
        M = np.zeros((4, 4))
        for k in range(K):
            undo = np.eye(4)
            undo[:3, 3] = -J[k]
            M += asset.weights[i, k] * (world[k] @ undo)
        out[i] = (M @ np.append(v[i], 1.0))[:3]
    return out


def test_rodrigues_simple_cases():
    np.testing.assert_array_equal(rodrigues(np.zeros(3)).data, np.eye(3))
    R = rodrigues(np.array([0.0, 0.0, np.pi])).data
    np.testing.assert_allclose(R @ [1.0, 0, 0], [-1.0, 0, 0], atol=1e-12)


@given(aa_vectors)
def test_rodrigues_is_proper_rotation_matching_quaternions(aa):
    R = rodrigues(aa).data
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-10)
    assert abs(np.linalg.det(R) - 1) < 1e-10
    np.testing.assert_allclose(R, Rotation.from_rotvec(aa).as_matrix(), atol=1e-10)


def test_rodrigues_gradients_including_small_angles(rng):
    for aa in [rng.normal(size=3), rng.normal(size=3) * 1e-6, np.array([1e-9, -2e-9, 0.5e-9])]:
        rep = grad_check(rodrigues, [aa])
        assert rep.passed, rep.max_rel_error


def test_toy_asset_invariants(asset):
    asset.validate()
    np.testing.assert_allclose(asset.weights.sum(1), 1, atol=1e-6)
    np.testing.assert_allclose(asset.J_regressor_eval.sum(1), 1, atol=1e-6)
    assert asset.num_vertices == 64 and asset.num_joints == 6
    assert asset.J_regressor_eval.shape == (17, 64)
    assert asset.parents[0] < 0 and all(0 <= p < k for k, p in enumerate(asset.parents) if k)


def test_toy_asset_is_deterministic():
    a, b = toy_asset(seed=3), toy_asset(seed=3)
    for k, v in a.to_arrays().items():
        assert v.tobytes() == b.to_arrays()[k].tobytes()


def test_rest_pose_is_template_exactly(asset, asset3):
    for a in (asset, asset3):
        v = forward_mesh(np.zeros(72), np.zeros(10), a).data
        assert np.array_equal(v, a.template)


def test_single_blend_shape(asset):
    beta = np.zeros(10)
    beta[0] = 1.0
    v = forward_mesh(np.zeros(72), beta, asset).data
    np.testing.assert_allclose(v, asset.template + asset.shapedirs[0], atol=1e-15)


def test_forward_mesh_matches_chain_oracle(asset3, rng):
    for _ in range(5):
        pose = np.zeros(72)
        pose[:9] = rng.normal(scale=0.8, size=9)
        beta = rng.normal(size=10)
        got = forward_mesh(pose, beta, asset3).data
        np.testing.assert_allclose(got, chain_oracle(asset3, pose, beta), atol=1e-9)


def test_forward_mesh_batched_matches_single(asset, rng):
    pose = rng.normal(scale=0.3, size=(3, 72))
    beta = rng.normal(size=(3, 10))
    batched = forward_mesh(pose, beta, asset).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], forward_mesh(pose[i], beta[i], asset).data, atol=1e-13)


@given(aa_vectors)
def test_global_rotation_equivariance(asset, aa):
    """Rotating the root and the rest geometry rotates the posed mesh."""
    rng = np.random.default_rng(0)
    pose = np.zeros(72)
    pose[3:18] = rng.normal(scale=0.4, size=15)
    Q = Rotation.from_rotvec(aa).as_matrix()
    base = forward_mesh(pose, np.zeros(10), asset).data
    rot = Rotation.from_rotvec(aa)
    pose2 = pose.copy()
    pose2[:3] = rot.as_rotvec()
    rotated = forward_mesh(pose2, np.zeros(10), asset).data
    # rotation about the root joint
    J0 = asset.J_regressor_model[0] @ asset.template
    np.testing.assert_allclose(rotated - J0, (base - J0) @ Q.T, atol=1e-8)


def test_forward_mesh_gradients(asset3, rng):
    pose = np.zeros(72)
    pose[:9] = rng.normal(scale=0.5, size=9)
    beta = rng.normal(size=10)
    rep = grad_check(lambda p, b: forward_mesh(p, b, asset3), [pose, beta])
    assert rep.passed, rep.max_rel_error


def test_regress_joints_cases(rng):
    V = rng.normal(size=(8, 3))
    W = np.zeros((2, 8))
    W[0, 3] = W[1, 6] = 1
    np.testing.assert_array_equal(regress_joints(V, W).data, V[[3, 6]])
    np.testing.assert_allclose(regress_joints(V, np.full((1, 8), 1 / 8)).data[0], V.mean(0), atol=1e-15)
    W = rng.uniform(size=(5, 8))
    ref = np.array([[sum(W[n, v] * V[v, c] for v in range(8)) for c in range(3)] for n in range(5)])
    np.testing.assert_allclose(regress_joints(V, W).data, ref, atol=1e-12)
    with pytest.raises(ShapeError):
        regress_joints(V, np.ones((2, 7)))
    assert grad_check(lambda v: regress_joints(v, W), [V]).passed


def test_project_cases(rng):
    np.testing.assert_allclose(project(np.array([[0.3, -0.2, 5.0]]), np.array([1.0, 0, 0])).data, [[0.3, -0.2]])
    np.testing.assert_allclose(project(np.array([[0.5, 0.5, 9.0]]), np.array([2.0, 0.1, 0])).data, [[1.1, 1.0]])
    J = rng.normal(size=(17, 3))
    dz = J.copy()
    dz[:, 2] += rng.normal(size=17) * 10
    cam = np.array([1.3, 0.2, -0.1])
    np.testing.assert_array_equal(project(J, cam).data, project(dz, cam).data)
    with pytest.raises(ValueError):
        project(J, np.array([0.0, 0, 0]))
    assert grad_check(lambda j, c: project(j, c), [J, cam]).passed


def test_body_params_validation():
    BodyParams.rest()
    with pytest.raises(ValueError):
        BodyParams(np.zeros(71), np.zeros(10), np.array([1.0, 0, 0]))
    with pytest.raises(ValueError):
        BodyParams(np.zeros(72), np.zeros(10), np.array([-1.0, 0, 0]))


def test_joint_set_labels():
    js = JointSet(np.zeros((17, 3)))
    assert js.labels == JOINT_NAMES and len(set(JOINT_NAMES)) == NUM_JOINTS == 17
    with pytest.raises(ValueError):
        JointSet(np.zeros((16, 3)))


def test_asset_archive_round_trip(asset, tmp_path):
    p = tmp_path / "toy.jtrk"
    asset.save(p)
    back = load_asset(p)
    for k, v in asset.to_arrays().items():
        np.testing.assert_allclose(getattr(back, k), v, atol=1e-15)
