"""Zero-shot template-based 6D object pose estimation toolkit.

Matches dense patch descriptors of a segmented RGB crop against rendered
object templates, lifts mutual-nearest-neighbor matches to 2D-3D
correspondences through colored object coordinates, and recovers the pose
with RANSAC PnP. Ships a BOP-style evaluation harness and a model-free
synthetic self-test.
"""

from .geometry import (CameraIntrinsics, Pose, look_at_pose,
                       rotation_angle_between, transform_and_project)
from .mesh import TriMesh, load_mesh, nocs_decode, nocs_encode, write_ply
from .render import (RenderOutput, ViewSample, RASTER_BACKEND,
                     rasterize_coordinate_map, sample_viewpoints)
from .descriptors import (CropTransform, DescriptorGrid, GlobalDescriptor,
                          crop_and_resize, oracle_descriptors, pool_global,
                          read_tensor, write_tensor)
from .matching import (CorrespondenceSet, TemplateMatch, lift_correspondences,
                       match_template, mutual_nearest_neighbors)
from .pose_solver import (PoseEstimate, RansacParams, ransac_pnp,
                          reprojection_errors, solve_pnp)
from .bop_eval import (ArSummary, ErrorReport, ResultRecord, SymmetrySet,
                       average_recall, load_bop_scene, load_models_info,
                       pose_error_metrics, read_results_csv, write_results_csv)
from .template_store import TemplateStore, build_template_store
from .pipeline import PipelineConfig, cmd_selftest, estimate_dataset

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "Pose", "look_at_pose", "rotation_angle_between",
    "transform_and_project",
    "TriMesh", "load_mesh", "nocs_decode", "nocs_encode", "write_ply",
    "RenderOutput", "ViewSample", "RASTER_BACKEND", "rasterize_coordinate_map",
    "sample_viewpoints",
    "CropTransform", "DescriptorGrid", "GlobalDescriptor", "crop_and_resize",
    "oracle_descriptors", "pool_global", "read_tensor", "write_tensor",
    "CorrespondenceSet", "TemplateMatch", "lift_correspondences",
    "match_template", "mutual_nearest_neighbors",
    "PoseEstimate", "RansacParams", "ransac_pnp", "reprojection_errors", "solve_pnp",
    "ArSummary", "ErrorReport", "ResultRecord", "SymmetrySet", "average_recall",
    "load_bop_scene", "load_models_info", "pose_error_metrics",
    "read_results_csv", "write_results_csv",
    "TemplateStore", "build_template_store",
    "PipelineConfig", "cmd_selftest", "estimate_dataset",
    "__version__",
]
