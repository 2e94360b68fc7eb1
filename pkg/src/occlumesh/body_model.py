"""Differentiable SMPL-style body: parameters -> vertices -> joints -> 2D.

Coordinates are in the camera frame: x right, y down, z away from the
camera, in meters.  Pose-dependent correctives are not modelled.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull

from .diffcore import Tensor, archive, ops
from .diffcore.ops import ShapeError

log = logging.getLogger(__name__)

NUM_POSE = 72
NUM_SHAPE = 10
NUM_CAM = 3

# canonical evaluation order shared by ground truth and predictions
JOINT_NAMES = (
    "pelvis",
    "left_hip", "left_knee", "left_ankle",
    "right_hip", "right_knee", "right_ankle",
    "spine", "neck", "nose", "head",
    "left_shoulder", "left_elbow", "left_wrist",
    "right_shoulder", "right_elbow", "right_wrist",
)
NUM_JOINTS = len(JOINT_NAMES)
PELVIS = 0

ASSET_KEYS = ("template", "shapedirs", "weights", "parents", "J_regressor_model", "J_regressor_eval")


@dataclass
class BodyParams:
    pose: np.ndarray    # (72,) axis-angle, radians
    shape: np.ndarray   # (10,)
    cam: np.ndarray     # (s, tx, ty)

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(-1)
        self.shape = np.asarray(self.shape, dtype=np.float64).reshape(-1)
        self.cam = np.asarray(self.cam, dtype=np.float64).reshape(-1)
        if self.pose.size != NUM_POSE or self.shape.size != NUM_SHAPE or self.cam.size != NUM_CAM:
            raise ValueError("BodyParams needs 72 pose, 10 shape and 3 camera values")
        if not self.cam[0] > 0:
            raise ValueError(f"camera scale must be positive, got {self.cam[0]}")

    @classmethod
    def rest(cls) -> "BodyParams":
        return cls(np.zeros(NUM_POSE), np.zeros(NUM_SHAPE), np.array([1.0, 0.0, 0.0]))


@dataclass
class JointSet:
    coords: np.ndarray                      # (17, 3)
    labels: tuple[str, ...] = JOINT_NAMES

    def __post_init__(self):
        if self.coords.shape != (NUM_JOINTS, 3) or len(self.labels) != NUM_JOINTS:
            raise ValueError("JointSet holds exactly 17 labelled 3D joints")


@dataclass
class BodyModelAsset:
    template: np.ndarray            # (V, 3)
    shapedirs: np.ndarray           # (10, V, 3)
    weights: np.ndarray             # (V, K), rows sum to 1
    parents: np.ndarray             # (K,), parents[0] == -1
    J_regressor_model: np.ndarray   # (K, V)
    J_regressor_eval: np.ndarray    # (17, V)
    faces: np.ndarray | None = None  # (F, 3), only needed for mesh export

    @property
    def num_vertices(self) -> int:
        return self.template.shape[0]

    @property
    def num_joints(self) -> int:
        return self.parents.shape[0]

    def validate(self) -> None:
        V, K = self.num_vertices, self.num_joints
        if self.template.shape != (V, 3) or self.shapedirs.shape != (NUM_SHAPE, V, 3):
            raise ValueError("template/shapedirs have inconsistent shapes")
        if self.weights.shape != (V, K) or self.J_regressor_model.shape != (K, V):
            raise ValueError("skinning weights / model regressor have inconsistent shapes")
        if self.J_regressor_eval.shape != (NUM_JOINTS, V):
            raise ValueError(f"evaluation regressor must be {NUM_JOINTS} x V")
        if K > NUM_POSE // 3:
            raise ValueError(f"at most {NUM_POSE // 3} kinematic joints are supported")
        if not np.allclose(self.weights.sum(1), 1, atol=1e-6):
            raise ValueError("skinning weight rows must sum to 1")
        if not np.allclose(self.J_regressor_eval.sum(1), 1, atol=1e-6):
            raise ValueError("evaluation regressor rows must sum to 1")
        if self.parents[0] != -1 or any(not (0 <= self.parents[k] < k) for k in range(1, K)):
            raise ValueError("kinematic parents must form a tree rooted at joint 0 (parents before children)")

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {
            "template": self.template.astype(np.float32),
            "shapedirs": self.shapedirs.astype(np.float32),
            "weights": self.weights.astype(np.float32),
            "parents": self.parents.astype(np.int64),
            "J_regressor_model": self.J_regressor_model.astype(np.float32),
            "J_regressor_eval": self.J_regressor_eval.astype(np.float32),
        }
        if self.faces is not None:
            out["faces"] = self.faces.astype(np.int64)
        return out

    def save(self, path) -> None:
        archive.save(path, self.to_arrays())


def load_asset(path) -> BodyModelAsset:
    """Read an asset stored as a named tensor archive."""
    arrs = archive.load(path)
    missing = [k for k in ASSET_KEYS if k not in arrs]
    if missing:
        raise KeyError(f"asset {path} lacks {missing}")
    asset = BodyModelAsset(
        template=arrs["template"].astype(np.float64),
        shapedirs=arrs["shapedirs"].astype(np.float64),
        weights=arrs["weights"].astype(np.float64),
        parents=arrs["parents"].astype(np.int64),
        J_regressor_model=arrs["J_regressor_model"].astype(np.float64),
        J_regressor_eval=arrs["J_regressor_eval"].astype(np.float64),
        faces=arrs["faces"].astype(np.int64) if "faces" in arrs else None,
    )
    # float32 storage loses the exact row sums; renormalise in float64
    asset.weights /= asset.weights.sum(1, keepdims=True)
    asset.J_regressor_eval /= asset.J_regressor_eval.sum(1, keepdims=True)
    asset.validate()
    return asset


# ------------------------------------------------------------------ toy asset

_TOY_JOINTS = np.array([
    [0.00, 0.00, 0.0],    # 0 pelvis
    [0.00, -0.32, 0.0],   # 1 chest
    [0.14, -0.36, 0.0],   # 2 left shoulder
    [-0.14, -0.36, 0.0],  # 3 right shoulder
    [0.08, 0.03, 0.0],    # 4 left hip
    [-0.08, 0.03, 0.0],   # 5 right hip
])
_TOY_PARENTS = np.array([-1, 0, 1, 1, 0, 0])

_TOY_LANDMARKS = {
    "pelvis": (0.0, 0.0, 0.0), "spine": (0.0, -0.2, 0.0), "neck": (0.0, -0.38, 0.0),
    "nose": (0.0, -0.49, -0.09), "head": (0.0, -0.53, 0.0),
    "left_hip": (0.09, 0.06, 0.0), "left_knee": (0.09, 0.33, 0.0), "left_ankle": (0.09, 0.56, 0.0),
    "left_shoulder": (0.17, -0.36, 0.0), "left_elbow": (0.37, -0.36, 0.0), "left_wrist": (0.56, -0.36, 0.0),
}


def _mirror(p):
    return (-p[0], p[1], p[2])


def _regressor(points: np.ndarray, verts: np.ndarray, k: int, sigma: float) -> np.ndarray:
    rows = np.zeros((len(points), len(verts)))
    for i, p in enumerate(points):
        d = np.linalg.norm(verts - p, axis=1)
        near = np.argsort(d, kind="stable")[:k]
        w = np.exp(-0.5 * (d[near] / sigma) ** 2)
        rows[i, near] = w / w.sum()
    return rows


def toy_asset(seed: int = 0, num_joints: int = 6) -> BodyModelAsset:
    """Procedural 64-vertex stick body with 6 kinematic joints.

    ``num_joints=3`` keeps only pelvis, chest and left shoulder (every vertex
    is re-skinned to those three), which is handy for brute-force checks.
    """
    rng = np.random.default_rng(seed)
    verts, weights, groups = [], [], []

    def add(p, w, group):
        verts.append(p)
        weights.append(w)
        groups.append(group)

    K = 6
    # torso: 4 rings of 4
    for y in (0.05, -0.08, -0.21, -0.34):
        t = np.clip((0.05 - y) / 0.39, 0, 1)
        wc = t * t * (3 - 2 * t)
        for ang in (0.25, 0.75, 1.25, 1.75):
            a = np.pi * ang
            w = np.zeros(K)
            w[0], w[1] = 1 - wc, wc
            add((0.11 * np.cos(a), y, 0.07 * np.sin(a)), w, "torso")
    # head: 10 named points around (0, -0.5, 0)
    for p in [(0, -0.49, -0.095), (0.03, -0.52, -0.08), (-0.03, -0.52, -0.08), (0.085, -0.50, 0),
              (-0.085, -0.50, 0), (0, -0.59, 0), (0, -0.50, 0.085), (0, -0.42, -0.05),
              (0, -0.40, -0.03), (0, -0.41, 0.04)]:
        w = np.zeros(K)
        w[1] = 1
        add(p, w, "head")
    # arms: 3 rings of 3 along x
    for side, j in ((1, 2), (-1, 3)):
        for ri, d in enumerate((0.06, 0.25, 0.44)):
            for ang in (0.5, 7 / 6, 11 / 6):
                a = np.pi * ang
                w = np.zeros(K)
                if ri == 0:
                    w[1], w[j] = 0.5, 0.5
                else:
                    w[j] = 1
                add((side * (0.14 + d), -0.36 + 0.035 * np.sin(a), 0.035 * np.cos(a)), w, f"arm{j}")
    # legs: 3 rings of 3 along y plus a foot point
    for side, j in ((1, 4), (-1, 5)):
        for ri, y in enumerate((0.10, 0.33, 0.56)):
            for ang in (0.5, 7 / 6, 11 / 6):
                a = np.pi * ang
                w = np.zeros(K)
                if ri == 0:
                    w[0], w[j] = 0.5, 0.5
                else:
                    w[j] = 1
                add((side * 0.09 + 0.045 * np.cos(a), y, 0.045 * np.sin(a)), w, f"leg{j}")
        w = np.zeros(K)
        w[j] = 1
        add((side * 0.09, 0.60, -0.08), w, f"leg{j}")

    template = np.asarray(verts, dtype=np.float64)
    template = template + rng.normal(scale=0.003, size=template.shape)
    weights = np.asarray(weights)
    groups = np.asarray(groups)
    V = len(template)

    # shape space: three axis stretches plus smooth random fields
    shapedirs = np.zeros((NUM_SHAPE, V, 3))
    for a in range(3):
        shapedirs[a, :, a] = 0.06 * template[:, a]
    for i in range(3, NUM_SHAPE):
        coeff = rng.normal(size=(4, 3)) * 0.02
        basis = np.concatenate([np.ones((V, 1)), template], axis=1)
        shapedirs[i] = basis @ coeff

    landmarks = {}
    for name, p in _TOY_LANDMARKS.items():
        landmarks[name] = p
        if name.startswith("left_"):
            landmarks["right_" + name[5:]] = _mirror(p)
    eval_pts = np.array([landmarks[n] for n in JOINT_NAMES])
    J_eval = _regressor(eval_pts, template, k=4, sigma=0.05)
    J_model = _regressor(_TOY_JOINTS, template, k=6, sigma=0.05)
    parents = _TOY_PARENTS.copy()

    if num_joints == 3:
        keep = [0, 1, 2]
        remap = np.array([0, 1, 2, 1, 0, 0])  # right arm -> chest, legs -> pelvis
        w3 = np.zeros((V, 3))
        for k in range(K):
            w3[:, remap[k]] += weights[:, k]
        weights, J_model, parents = w3, J_model[keep], parents[keep]
    elif num_joints != K:
        raise ValueError("toy asset supports 6 or 3 joints")

    faces = []
    for g in dict.fromkeys(groups):
        idx = np.flatnonzero(groups == g)
        hull = ConvexHull(template[idx])
        faces.append(idx[hull.simplices])
    asset = BodyModelAsset(template, shapedirs, weights, parents, J_model, J_eval,
                           np.concatenate(faces).astype(np.int64))
    asset.validate()
    return asset


# ------------------------------------------------------------------ differentiable ops

_SKEW = np.zeros((3, 9))
# row-major skew matrix [[0,-z,y],[z,0,-x],[-y,x,0]] as a linear map of (x, y, z)
for _src, _dst, _sgn in ((2, 1, -1), (1, 2, 1), (2, 3, 1), (0, 5, -1), (1, 6, -1), (0, 7, 1)):
    _SKEW[_src, _dst] = _sgn

_SMALL_ANGLE2 = 1e-8


def rodrigues(axis_angle) -> Tensor:
    """Axis-angle (..., 3) -> rotation matrices (..., 3, 3).

    Below 1e-4 rad the sin/cos coefficients switch to their second-order
    series so the map (and its gradient) stays finite at zero.
    """
    r = axis_angle if isinstance(axis_angle, Tensor) else Tensor(np.asarray(axis_angle, dtype=np.float64))
    dt = r.dtype
    lead = r.shape[:-1]
    theta2 = ops.sum(ops.mul(r, r), axis=-1, keepdims=True)
    small = theta2.data < _SMALL_ANGLE2
    safe2 = ops.where(small, np.ones((), dt), theta2)
    theta = ops.sqrt(safe2)
    a = ops.where(small, 1.0 - theta2 / 6.0, ops.sin(theta) / theta)
    b = ops.where(small, 0.5 - theta2 / 24.0, (1.0 - ops.cos(theta)) / safe2)
    K = ops.reshape(ops.matmul(ops.reshape(r, (-1, 3)), _SKEW.astype(dt)), lead + (3, 3))
    a = ops.reshape(a, lead + (1, 1))
    b = ops.reshape(b, lead + (1, 1))
    eye = np.eye(3, dtype=dt)
    return ops.add(ops.add(eye, ops.mul(a, K)), ops.mul(b, ops.matmul(K, K)))


class BodyModel:
    """Asset bound to a dtype, exposing the differentiable forward pass."""

    def __init__(self, asset: BodyModelAsset, dtype=np.float64):
        asset.validate()
        self.asset = asset
        self.dtype = np.dtype(dtype)
        V, K = asset.num_vertices, asset.num_joints
        self.template = asset.template.astype(dtype)
        self.shapedirs = asset.shapedirs.reshape(NUM_SHAPE, V * 3).astype(dtype)
        self.weights = asset.weights.astype(dtype)
        self.J_model = asset.J_regressor_model.astype(dtype)
        self.J_eval = asset.J_regressor_eval.astype(dtype)
        self.parents = [int(p) for p in asset.parents]
        self.V, self.K = V, K

    def vertices(self, pose, shape) -> Tensor:
        return forward_mesh(pose, shape, self)

    def joints(self, vertices) -> Tensor:
        return regress_joints(vertices, self.J_eval)


def _as_model(asset) -> BodyModel:
    return asset if isinstance(asset, BodyModel) else BodyModel(asset)


def forward_mesh(pose, shape, asset) -> Tensor:
    """Blend-shaped template posed by linear blend skinning.

    ``pose`` (B, 72) or (72,), ``shape`` (B, 10) or (10,).  Only the first
    3*K pose values drive an asset with K kinematic joints.  Skinning is
    written as v + sum_k w_k[(R_k - I) v + a_k] so the rest pose reproduces
    the template bit-for-bit.
    """
    model = _as_model(asset)
    dt = model.dtype
    pose = pose if isinstance(pose, Tensor) else Tensor(np.asarray(pose, dtype=dt))
    shape = shape if isinstance(shape, Tensor) else Tensor(np.asarray(shape, dtype=dt))
    single = pose.ndim == 1
    if single:
        pose = ops.reshape(pose, (1, -1))
        shape = ops.reshape(shape, (1, -1))
    B, V, K = pose.shape[0], model.V, model.K

    offsets = ops.reshape(ops.matmul(shape, model.shapedirs), (B, V, 3))
    v_shaped = ops.add(model.template, offsets)
    J = ops.matmul(model.J_model, v_shaped)                      # (B, K, 3)

    rots = rodrigues(ops.reshape(pose[:, : 3 * K], (B, K, 3)))   # (B, K, 3, 3)
    eye = np.eye(3, dtype=dt)
    G, A = [], []
    for k in range(K):
        Rk = rots[:, k]
        Jk = ops.reshape(J[:, k], (B, 3, 1))
        p = model.parents[k]
        if p < 0:
            Gk = Rk
            Ak = ops.matmul(ops.sub(eye, Gk), Jk)
        else:
            Gk = ops.matmul(G[p], Rk)
            Ak = ops.add(A[p], ops.matmul(ops.sub(G[p], Gk), Jk))
        G.append(Gk)
        A.append(Ak)
    D = ops.sub(ops.stack(G, axis=1), eye)                       # (B, K, 3, 3)
    At = ops.reshape(ops.stack(A, axis=1), (B, K, 3))
    TD = ops.reshape(ops.matmul(model.weights, ops.reshape(D, (B, K, 9))), (B, V, 3, 3))
    Tt = ops.matmul(model.weights, At)                           # (B, V, 3)
    moved = ops.reshape(ops.matmul(TD, ops.reshape(v_shaped, (B, V, 3, 1))), (B, V, 3))
    verts = ops.add(v_shaped, ops.add(moved, Tt))
    return ops.reshape(verts, (V, 3)) if single else verts


def regress_joints(vertices, W) -> Tensor:
    """``W @ vertices``: (N, V) x (..., V, 3) -> (..., N, 3)."""
    vertices = vertices if isinstance(vertices, Tensor) else Tensor(np.asarray(vertices))
    W = np.asarray(W.data if isinstance(W, Tensor) else W, dtype=vertices.dtype)
    if W.shape[1] != vertices.shape[-2]:
        raise ShapeError(f"regressor expects {W.shape[1]} vertices, got {vertices.shape[-2]}")
    return ops.matmul(W, vertices)


def project(joints, cam) -> Tensor:
    """Weak perspective: (x, y) <- s * (X, Y) + (tx, ty); depth is dropped.

    ``joints`` (..., N, 3); ``cam`` (..., 3) holding (s, tx, ty) with s > 0.
    """
    joints = joints if isinstance(joints, Tensor) else Tensor(np.asarray(joints, dtype=np.float64))
    cam = cam if isinstance(cam, Tensor) else Tensor(np.asarray(cam, dtype=joints.dtype))
    if np.any(cam.data[..., 0] <= 0):
        raise ValueError("weak-perspective scale must be positive")
    lead = cam.shape[:-1]
    s = ops.reshape(cam[..., 0:1], lead + (1, 1))
    t = ops.reshape(cam[..., 1:3], lead + (1, 2))
    return ops.add(ops.mul(s, joints[..., 0:2]), t)
