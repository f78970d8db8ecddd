"""Synthetic BOP-layout datasets rendered from procedural meshes.

Used by the self-test and the ablation harness: query views are rendered
to full-frame coordinate maps (the oracle descriptor backend reads those
instead of RGB), masks and ground-truth poses go into the standard BOP
files, so the very same estimation code path runs on synthetic and real
directories.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .bop_eval import GtInstance, SceneAnnotation, write_bop_scene
from .descriptors import write_tensor
from .geometry import CameraIntrinsics, Pose, look_at_pose, rotation_about_axis
from .mesh import TriMesh, quantize_nocs, write_ply
from .render import rasterize_coordinate_map

DEFAULT_QUERY_CAMERA = CameraIntrinsics(550.0, 550.0, 320.0, 240.0, 640, 480)


def sample_query_poses(n: int, diameter_mm: float, seed: int,
                       radius_scale: float = 2.5) -> list[Pose]:
    """Seeded random viewpoints: uniform directions (held out from any
    icosahedral grid with probability one), jittered radius, full in-plane
    roll and a small target offset so the object sits off-center."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E3779B9]))
    poses = []
    while len(poses) < n:
        direction = rng.normal(size=3)
        norm = np.linalg.norm(direction)
        if norm < 1e-6:
            continue
        direction /= norm
        radius = radius_scale * diameter_mm * rng.uniform(0.9, 1.15)
        target = rng.normal(size=3)
        target *= 0.04 * diameter_mm / max(np.linalg.norm(target), 1e-9)
        base = look_at_pose(direction * radius, target)
        roll = rng.uniform(0.0, 2.0 * np.pi)
        roll_pose = Pose(rotation_about_axis([0.0, 0.0, 1.0], roll), np.zeros(3))
        poses.append(roll_pose.compose(base))
    return poses


def write_synthetic_dataset(root, mesh: TriMesh, query_poses: list[Pose],
                            K: CameraIntrinsics = DEFAULT_QUERY_CAMERA,
                            object_id: int = 1, scene_id: int = 1,
                            split: str = "test") -> list[SceneAnnotation]:
    """Write models/, scene jsons, visible masks and query coordinate maps."""
    root = Path(root)
    models_dir = root / "models"
    models_dir.mkdir(parents=True, exist_ok=True)
    write_ply(mesh, models_dir / f"obj_{object_id:06d}.ply", binary=True)
    models_info = {
        str(object_id): {
            "diameter": float(mesh.diameter),
            "min_x": float(mesh.bbox_min[0]), "min_y": float(mesh.bbox_min[1]),
            "min_z": float(mesh.bbox_min[2]),
            "size_x": float(mesh.extent[0]), "size_y": float(mesh.extent[1]),
            "size_z": float(mesh.extent[2]),
        }
    }
    (models_dir / "models_info.json").write_text(
        json.dumps(models_info, sort_keys=True, indent=1))

    scene_dir = root / split / f"{scene_id:06d}"
    (scene_dir / "mask_visib").mkdir(parents=True, exist_ok=True)
    (scene_dir / "query_coords").mkdir(parents=True, exist_ok=True)

    annotations = []
    for im_id, pose in enumerate(query_poses):
        render = rasterize_coordinate_map(mesh, pose, K)
        if render.empty:
            raise ValueError(f"query view {im_id} renders empty; lower the radius")
        mask_path = scene_dir / "mask_visib" / f"{im_id:06d}_{0:06d}.png"
        Image.fromarray(render.mask.astype(np.uint8) * 255).save(mask_path)
        coords = render.coord_map.copy()
        coords[~render.mask] = 0.0
        write_tensor(scene_dir / "query_coords" / f"{im_id:06d}_{0:06d}.coord.zst6",
                     quantize_nocs(coords))
        annotations.append(SceneAnnotation(
            scene_id=scene_id, image_id=im_id, camera=K,
            gt=(GtInstance(obj_id=object_id, pose=pose, mask_path=mask_path),)))
    write_bop_scene(annotations, root / split)
    return annotations
