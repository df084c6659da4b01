"""Multi-dataset multi-camera 3D detection tooling.

Dataset harmonization (ghost cameras, virtual intrinsics, category mapping),
PDIR statistics and expert weighting/distillation kernels, and an NDS+
evaluation engine.
"""
__version__ = "0.1.0"

from .dataset_io import CategoryMap, DatasetManifest, Sample, add_ghost_cameras, load_manifest, merge_datasets
from .experts import (
    ExpertWeights,
    FeatureMap,
    ReplacementSchedule,
    expert_distill_loss,
    expert_weights,
    replacement_mask,
    semantic_distill_loss,
)
from .geometry import (
    Box3D,
    Camera,
    CameraExtrinsics,
    CameraIntrinsics,
    CameraRig,
    box_ground_corners,
    project_point,
    rescale_intrinsics,
)
from .metrics import Detection, EvalConfig, EvalReport, evaluate, nds_plus
from .pdir import GroundPlane, PdirResult, SplitStrategy, compute_pdir, fit_ground_plane, pavement_row, split_dataset
