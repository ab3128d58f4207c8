"""disksplat: scene reconstruction with oriented 2D Gaussian disks.

Reconstructs scenes from posed multi-view images with per-view object
label maps, carries an 8-dim identity vector per splat for open-set
segmentation, extracts target objects by classifier confidence, and
meshes them through depth fusion.
"""

from .camera import Camera, look_at
from .errors import (CheckpointError, DiskSplatError, ExtractionError,
                     InpaintServiceError, MeshingError, SceneFormatError,
                     TrainingDiverged)
from .metrics import GeomScore, SegScore, f1_geometry, mbiou, miou
from .model import IDENTITY_DIM, NUM_CLASSES, SplatModel
from .render import RenderOptions, RenderResult, render, render_depth
from .replenish import (InpaintClient, ReplenishConfig, ReplenishResult,
                        coverage_mask, make_inpaint_mask, replenish_loop)
from .sceneio import (SceneManifest, export_mesh, load_checkpoint,
                      load_manifest, load_mesh, save_checkpoint)
from .seghead import (LossWeights, SegHead, classify, extract_target,
                      render_id_map, render_target_mask)
from .training import TrainConfig, train
from .tsdf import MeshingConfig, TriangleMesh, extract_mesh

__version__ = "0.1.0"

__all__ = [
    "Camera", "look_at", "SplatModel", "SegHead", "LossWeights",
    "RenderOptions", "RenderResult", "render", "render_depth",
    "classify", "extract_target", "render_id_map", "render_target_mask",
    "IDENTITY_DIM", "NUM_CLASSES",
    "TrainConfig", "train",
    "SceneManifest", "load_manifest", "load_checkpoint", "save_checkpoint",
    "export_mesh", "load_mesh",
    "MeshingConfig", "TriangleMesh", "extract_mesh",
    "SegScore", "GeomScore", "miou", "mbiou", "f1_geometry",
    "ReplenishConfig", "ReplenishResult", "replenish_loop",
    "InpaintClient", "coverage_mask", "make_inpaint_mask",
    "DiskSplatError", "SceneFormatError", "CheckpointError",
    "ExtractionError", "MeshingError", "TrainingDiverged",
    "InpaintServiceError", "__version__",
]
