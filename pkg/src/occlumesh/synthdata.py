"""Seeded synthetic scenes: posed toy bodies point-splatted into small RGB
patches, optionally hidden behind rectangles or a second body."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from .body_model import NUM_POSE, NUM_SHAPE, BodyModel, BodyModelAsset, forward_mesh, project, regress_joints
from .diffcore import archive
from .extractor import norm_to_pixel

log = logging.getLogger(__name__)

MODES = ("none", "object", "person")
MAX_COVERAGE = 0.6
PALETTE = np.array([
    [0.85, 0.35, 0.30], [0.30, 0.55, 0.85], [0.95, 0.75, 0.25],
    [0.35, 0.80, 0.45], [0.75, 0.40, 0.80], [0.30, 0.80, 0.80],
])
BACKGROUND = 0.15
FIELDS = ("pose", "shape", "cam", "image", "joints_mm", "grid", "joints2d", "box_lo", "box_hi",
          "has_3d", "has_smpl", "coverage", "occluder_mask")


# ------------------------------------------------------------------ grid box

@dataclass
class GridAffine:
    """Per-axis affine g = m + (1 - 2m)(p - lo) / (hi - lo) between
    millimetres and the [0, 1]^3 grid."""
    lo: np.ndarray
    hi: np.ndarray
    margin: float = 0.0

    def to_grid(self, p):
        return self.margin + (1 - 2 * self.margin) * (np.asarray(p, dtype=np.float64) - self.lo) / (self.hi - self.lo)

    def from_grid(self, g):
        return self.lo + (np.asarray(g, dtype=np.float64) - self.margin) * (self.hi - self.lo) / (1 - 2 * self.margin)


def image_box(cam, depth_mm: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Box whose x/y faces project onto the image border.

    With weak perspective x_img = s X + t_x, the grid x coordinate equals
    (x_img + 1) / 2, so grid cells line up with image cells.  Depth spans
    [-1/s, 1/s] metres unless ``depth_mm`` is given.
    """
    s, tx, ty = (float(v) for v in cam)
    lo = np.array([(-1 - tx) / s, (-1 - ty) / s, -1 / s]) * 1000.0
    hi = np.array([(1 - tx) / s, (1 - ty) / s, 1 / s]) * 1000.0
    if depth_mm is not None:
        lo[2], hi[2] = -depth_mm, depth_mm
    return lo, hi


def normalize_to_grid(joints_mm, box, margin: float = 0.0) -> tuple[np.ndarray, GridAffine]:
    """Map joints into [0, 1]^3; a box that misses a joint is grown to fit."""
    j = np.asarray(joints_mm, dtype=np.float64)
    lo, hi = (np.array(b, dtype=np.float64) for b in box)
    if not (0 <= margin < 0.5):
        raise ValueError("margin must lie in [0, 0.5)")
    if np.any(j < lo) or np.any(j > hi):
        log.warning("joint outside the sample box; expanding box")
        lo = np.minimum(lo, j.min(0))
        hi = np.maximum(hi, j.max(0))
    aff = GridAffine(lo, hi, margin)
    return aff.to_grid(j), aff


# ------------------------------------------------------------------ rendering

def splat(points2d: np.ndarray, depth: np.ndarray, colors: np.ndarray, S: int, radius: float,
          image: np.ndarray | None = None, zbuf: np.ndarray | None = None):
    """Depth-tested disc splats.  Returns (image (3, S, S), zbuf, mask)."""
    image = np.full((3, S, S), BACKGROUND) if image is None else image
    zbuf = np.full((S, S), np.inf) if zbuf is None else zbuf
    mask = np.zeros((S, S), dtype=bool)
    px = norm_to_pixel(points2d, S)
    r = int(np.ceil(radius))
    offs = np.array([(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)
                     if dy * dy + dx * dx <= radius * radius])
    for (cx, cy), z, col in zip(px, depth, colors):
        rows = np.rint(cy).astype(int) + offs[:, 0]
        cols = np.rint(cx).astype(int) + offs[:, 1]
        ok = (rows >= 0) & (rows < S) & (cols >= 0) & (cols < S)
        rows, cols = rows[ok], cols[ok]
        mask[rows, cols] = True
        closer = z < zbuf[rows, cols]
        rows, cols = rows[closer], cols[closer]
        zbuf[rows, cols] = z
        image[:, rows, cols] = col[:, None]
    return image, zbuf, mask


def vertex_colors(asset: BodyModelAsset, depth: np.ndarray) -> np.ndarray:
    """Part colour from the dominant skinning joint, darkened with depth."""
    base = PALETTE[asset.weights.argmax(1) % len(PALETTE)]
    shade = 0.75 + 0.25 * np.clip(-depth / 0.1, -1, 1)
    return np.clip(base * shade[:, None], 0, 1)


# ------------------------------------------------------------------ sampling

@dataclass
class SynthConfig:
    S: int = 64
    pose_noise: float = 0.35       # radians, per axis-angle component
    root_noise: float = 0.15
    shape_radius: float = 1.0
    scale_range: tuple[float, float] = (0.8, 1.2)
    trans_range: float = 0.1
    splat_radius: float = 2.5
    pixel_noise: float = 0.01
    margin: float = 0.0


def sample_params(rng: np.random.Generator, K: int, cfg: SynthConfig):
    pose = np.zeros(NUM_POSE)
    pose[:3] = rng.uniform(-cfg.root_noise, cfg.root_noise, 3)
    pose[3:3 * K] = rng.uniform(-cfg.pose_noise, cfg.pose_noise, 3 * K - 3)
    d = rng.standard_normal(NUM_SHAPE)
    shape = d / np.linalg.norm(d) * cfg.shape_radius * rng.uniform() ** (1 / NUM_SHAPE)
    s = rng.uniform(*cfg.scale_range)
    cam = np.array([s, *rng.uniform(-cfg.trans_range, cfg.trans_range, 2)])
    return pose, shape, cam


def _posed(model: BodyModel, pose, shape, cam):
    verts = forward_mesh(pose, shape, model).data
    joints = regress_joints(verts, model.J_eval).data
    return verts, joints, project(verts, cam).data, project(joints, cam).data


def _render_body(asset, verts, verts2d, cfg, image=None, zbuf=None, z_shift=0.0):
    cols = vertex_colors(asset, verts[:, 2])
    return splat(verts2d, verts[:, 2] + z_shift, cols, cfg.S, cfg.splat_radius, image, zbuf)


def _pixels(xy, S):
    return np.clip(np.rint(norm_to_pixel(xy, S)).astype(int), 0, S - 1)


def _occluded_joints(joints2d, occ_mask, S):
    px = _pixels(joints2d, S)
    inside = np.all(np.abs(joints2d) <= 1, axis=-1)
    return inside & occ_mask[px[:, 1], px[:, 0]].astype(bool)


def make_sample(rng: np.random.Generator, model: BodyModel, mode: str, cfg: SynthConfig) -> dict:
    if mode not in MODES:
        raise ValueError(f"occlusion mode must be one of {MODES}")
    asset = model.asset
    pose, shape, cam = sample_params(rng, model.K, cfg)
    verts, joints, v2d, j2d = _posed(model, pose, shape, cam)
    S = cfg.S
    _, _, body_mask = _render_body(asset, verts, v2d, cfg, np.zeros((3, S, S)))
    occ = np.zeros((S, S), dtype=bool)
    layers = []                              # (kind, payload) drawn over the target

    if mode == "object":
        occ, rect, color = _place_rectangle(rng, body_mask, S)
        layers.append(("rect", (rect, color)))
    elif mode == "person":
        occ, other = _place_person(rng, model, cfg, body_mask, j2d)
        layers.append(("body", other))

    image, zbuf, _ = _render_body(asset, verts, v2d, cfg)
    for kind, payload in layers:
        if kind == "rect":
            (r0, r1, c0, c1), color = payload
            image[:, r0:r1, c0:c1] = color[:, None, None]
        else:
            ov, ov2d = payload
            image, zbuf, _ = _render_body(asset, ov, ov2d, cfg, image, zbuf, z_shift=-1.0)
    image = np.clip(image + rng.normal(0, cfg.pixel_noise, image.shape), 0, 1)
    body_px = body_mask.sum()
    coverage = float((occ & body_mask).sum() / body_px) if body_px else 0.0

    jmm = joints * 1000.0
    grid, aff = normalize_to_grid(jmm, image_box(cam), cfg.margin)
    return dict(pose=pose, shape=shape, cam=cam, image=image.astype(np.float32), joints_mm=jmm, grid=grid,
                joints2d=j2d, box_lo=aff.lo, box_hi=aff.hi, has_3d=np.uint8(1), has_smpl=np.uint8(1),
                coverage=np.array(coverage), occluder_mask=occ.astype(np.uint8))   # uint8: archives carry no bool


def _place_rectangle(rng, body_mask, S):
    rows, cols = np.nonzero(body_mask)
    color = rng.uniform(0, 1, 3)
    target = rng.uniform(0.15, MAX_COVERAGE)
    k = rng.integers(len(rows))
    cy, cx = rows[k], cols[k]
    occ = np.zeros_like(body_mask)
    rect = (cy, cy, cx, cx)
    body_px = body_mask.sum()
    aspect = rng.uniform(0.5, 2.0)
    for half in range(1, S):
        hh, hw = max(1, int(round(half * aspect))), half
        r = (max(cy - hh, 0), min(cy + hh + 1, S), max(cx - hw, 0), min(cx + hw + 1, S))
        m = np.zeros_like(body_mask)
        m[r[0]:r[1], r[2]:r[3]] = True
        if (m & body_mask).sum() / body_px > target:
            break
        occ, rect = m, r
    return occ, rect, color


def _place_person(rng, model, cfg, body_mask, j2d, attempts: int = 12):
    """Second body in front, shifted sideways so it hides part of the target."""
    S = cfg.S
    body_px = body_mask.sum()
    best = None
    for _ in range(attempts):
        pose, shape, cam = sample_params(rng, model.K, cfg)
        j = j2d[rng.integers(len(j2d))]
        side = rng.choice([-1.0, 1.0])
        offset = rng.uniform(0.15, 0.5)
        cam = cam.copy()
        for _step in range(20):
            cam[1] = j[0] + side * offset
            cam[2] = j[1] * 0.3 + rng.uniform(-0.1, 0.1)
            ov, _, ov2d, _ = _posed(model, pose, shape, cam)
            _, _, om = _render_body(model.asset, ov, ov2d, cfg, np.zeros((3, S, S)))
            cov = (om & body_mask).sum() / body_px
            if cov <= MAX_COVERAGE:
                break
            offset += 0.05
        if cov > MAX_COVERAGE:
            continue
        hidden = _occluded_joints(j2d, om, S).sum()
        cand = (hidden >= 2, -abs(cov - 0.35), om, (ov, ov2d))
        if best is None or cand[:2] > best[:2]:
            best = cand
        if hidden >= 2:
            break
    if best is None:
        return np.zeros_like(body_mask), (np.zeros((0, 3)), np.zeros((0, 2)))
    return best[2], best[3]


# ------------------------------------------------------------------ dataset

@dataclass
class Dataset:
    arrays: dict[str, np.ndarray]
    ids: list[str]
    margin: float = 0.0

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset({k: v[idx] for k, v in self.arrays.items()}, [self.ids[i] for i in idx], self.margin)

    def affine(self, i: int) -> GridAffine:
        return GridAffine(self.arrays["box_lo"][i], self.arrays["box_hi"][i], self.margin)

    def save(self, out_dir, shard_size: int = 64) -> list[str]:
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        for k, start in enumerate(range(0, len(self), shard_size)):
            sl = slice(start, start + shard_size)
            blob = {name: np.ascontiguousarray(arr[sl]) for name, arr in self.arrays.items()}
            p = os.path.join(out_dir, f"shard{k}.jtrk")
            archive.save(p, blob)
            paths.append(p)
        with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
            f.write(f"# margin {self.margin!r} shard_size {shard_size} count {len(self)}\n")
            for i, sid in enumerate(self.ids):
                lo, hi = self.arrays["box_lo"][i], self.arrays["box_hi"][i]
                f.write(f"{sid} has_3d={int(self.arrays['has_3d'][i])} has_smpl={int(self.arrays['has_smpl'][i])} "
                        f"lo={','.join(repr(float(v)) for v in lo)} hi={','.join(repr(float(v)) for v in hi)}\n")
        return paths

    @classmethod
    def load(cls, out_dir) -> "Dataset":
        with open(os.path.join(out_dir, "manifest.txt")) as f:
            header = f.readline().split()
            ids = [line.split()[0] for line in f if line.strip()]
        margin = float(header[header.index("margin") + 1])
        parts = []
        k = 0
        while os.path.exists(os.path.join(out_dir, f"shard{k}.jtrk")):
            parts.append(archive.load(os.path.join(out_dir, f"shard{k}.jtrk")))
            k += 1
        if not parts:
            raise FileNotFoundError(f"no shards in {out_dir}")
        arrays = {name: np.concatenate([p[name] for p in parts]) for name in parts[0]}
        if len(ids) != len(arrays["pose"]):
            raise ValueError("manifest and shards disagree on sample count")
        return cls(arrays, ids, margin)


def generate(seed: int, count: int, occlusion_mode: str, asset: BodyModelAsset,
             cfg: SynthConfig | None = None) -> Dataset:
    """``count`` samples; sample i uses the i-th child of SeedSequence(seed)."""
    cfg = cfg or SynthConfig()
    model = BodyModel(asset)
    children = np.random.SeedSequence(seed).spawn(count)
    samples = [make_sample(np.random.default_rng(c), model, occlusion_mode, cfg) for c in children]
    arrays = {k: np.stack([s[k] for s in samples]) for k in FIELDS}
    return Dataset(arrays, [f"s{seed}_{i:05d}" for i in range(count)], cfg.margin)
