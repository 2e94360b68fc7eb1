"""Occluded human mesh recovery at desk scale.

Differentiable SMPL-style body model, 2D->3D feature lifting with learnable
depth-rescaled coordinates, a fusion transformer with cascade refinement,
and 3D joint contrastive losses, all on a small numpy autodiff core.
"""
from .body_model import BodyModel, BodyModelAsset, BodyParams, JointSet, forward_mesh, project, regress_joints, rodrigues, toy_asset
from .config import ModelConfig, RunConfig, TrainConfig
from .model import OccluMeshNet, Trainer, evaluate

__version__ = "0.1.0"
