"""Part-aware mesh reconstruction of articulated objects.

Two-state multi-view RGB-D observations go in; out come connected
triangle meshes split into rigid parts, one recovered revolute or
prismatic joint per movable part, and URDF export of the result.
"""

from .articulation import (
    FREE,
    PRISMATIC,
    REVOLUTE,
    Joint,
    identity_joint,
    pca_seed_joint,
    transport_points,
)
from .bvh import TriangleBVH
from .dataset import CameraView, load_dataset, save_dataset
from .geometry import PinholeCamera
from .losses import (
    LossWeights,
    VertexMatcher,
    pixel_consistency_loss,
    reconstruction_loss,
    ssim,
    vertex_consistency_loss,
)
from .meshfield import MeshField
from .metrics import EvalReport, axis_angle_error, axis_pos_error, chamfer, evaluate_object
from .raster import RenderConfig, RenderResult, render, segmentation_map
from .remesh import RemeshConfig, remesh_all
from .synth import GroundTruth, Scene, SceneSpec, generate_scene, perturb_for_init
from .trainer import Adam, FitResult, TrainConfig, Trainer, fit
from .urdf import export_urdf, parse_urdf, validate_urdf

__version__ = "0.1.0"

__all__ = [
    "FREE", "PRISMATIC", "REVOLUTE",
    "Adam", "CameraView", "EvalReport", "FitResult", "GroundTruth",
    "Joint", "LossWeights", "MeshField", "PinholeCamera", "RemeshConfig",
    "RenderConfig", "RenderResult", "Scene", "SceneSpec", "TrainConfig",
    "Trainer", "TriangleBVH", "VertexMatcher",
    "axis_angle_error", "axis_pos_error", "chamfer", "evaluate_object",
    "export_urdf", "fit", "generate_scene", "identity_joint",
    "load_dataset", "parse_urdf", "pca_seed_joint", "perturb_for_init",
    "pixel_consistency_loss", "reconstruction_loss", "remesh_all",
    "render", "save_dataset", "segmentation_map", "ssim",
    "transport_points", "validate_urdf", "vertex_consistency_loss",
]
