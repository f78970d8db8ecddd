"""On-disk template store: coordinate maps, depth, masks and view metadata.

Layout, all paths relative to the store root:

    obj_<id, 6 digits>/
        manifest.json               object info + ordered view list
        view_<k, 6 digits>.coord.zst6   uint16 tensor, dim 3 (quantized coords)
        view_<k, 6 digits>.depth.zst6   float32 tensor, dim 1, mm
        view_<k, 6 digits>.mask.png     8-bit PNG, 0/255
        view_<k, 6 digits>.meta.json    pose, base camera, crop, level, flags
        view_<k, 6 digits>.loc.zst6     (optional) patch descriptors, written
        view_<k, 6 digits>.glob.zst6    by an external descriptor exporter

Templates are rendered directly at crop resolution: the virtual crop camera
is the base camera composed with the crop transform, so stored coordinate
maps align with 224 x 224 descriptor grids without any resampling. The view
list is ordered by farthest-point selection, which makes every prefix of the
manifest a well-spread template subset (used by the template-count ablation).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .descriptors import CropTransform, write_tensor, read_tensor
from .errors import InvalidMesh, IoError
from .geometry import CameraIntrinsics, Pose
from .mesh import TriMesh, dequantize_nocs, quantize_nocs
from .render import (BACKGROUND_COORD, ViewSample,
                     rasterize_coordinate_map)

EMPTY_RENDER = "empty_render"


@dataclass(frozen=True)
class NocsBounds:
    """Just enough of a mesh to decode normalized object coordinates."""

    bbox_min: np.ndarray
    bbox_max: np.ndarray

    @property
    def extent(self) -> np.ndarray:
        return self.bbox_max - self.bbox_min


def _pose_to_json(pose: Pose) -> dict:
    return {"R": [float(v) for v in pose.rotation.reshape(-1)],
            "t": [float(v) for v in pose.translation]}


def _pose_from_json(d: dict) -> Pose:
    return Pose(np.array(d["R"], dtype=np.float64).reshape(3, 3),
                np.array(d["t"], dtype=np.float64))


def _camera_to_json(K: CameraIntrinsics) -> dict:
    return {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy,
            "width": K.width, "height": K.height}


def _camera_from_json(d: dict) -> CameraIntrinsics:
    return CameraIntrinsics(d["fx"], d["fy"], d["cx"], d["cy"],
                            int(d["width"]), int(d["height"]))


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def object_dir(store_root, object_id: int) -> Path:
    return Path(store_root) / f"obj_{object_id:06d}"


@dataclass
class TemplateRecord:
    """One stored template view plus lazily loaded pixel data."""

    index: int
    pose: Pose
    crop: CropTransform
    icosa_level: int
    flags: tuple[str, ...]
    directory: Path
    bounds: NocsBounds

    @property
    def stem(self) -> str:
        return f"view_{self.index:06d}"

    def path(self, suffix: str) -> Path:
        return self.directory / f"{self.stem}.{suffix}"

    @property
    def usable(self) -> bool:
        return EMPTY_RENDER not in self.flags

    def load_coord_map(self) -> tuple[np.ndarray, np.ndarray]:
        """(coord_map, mask): float coords with background sentinel, bool mask.

        Reads from disk every call; callers cache derived data, not pixels.
        """
        levels, _ = read_tensor(self.path("coord.zst6"))
        mask = np.asarray(Image.open(self.path("mask.png"))) > 0
        coords = dequantize_nocs(levels).astype(np.float32)
        coords[~mask] = BACKGROUND_COORD
        return coords, mask

    def load_depth(self) -> np.ndarray:
        return read_tensor(self.path("depth.zst6"))[0][:, :, 0]


def _render_view_cropped(mesh: TriMesh, view: ViewSample, K: CameraIntrinsics,
                         pad: float, out_size: int):
    """Render one template at crop resolution; None when nothing is visible."""
    cam = view.pose.apply(mesh.vertices)
    visible = cam[:, 2] > 1e-6
    if not visible.any():
        return None, None
    z = cam[visible, 2]
    us = K.fx * cam[visible, 0] / z + K.cx
    vs = K.fy * cam[visible, 1] / z + K.cy
    w = max(float(us.max() - us.min()), 1e-3)
    h = max(float(vs.max() - vs.min()), 1e-3)
    side = pad * max(w, h)
    scale = out_size / side
    offset_x = (us.max() + us.min()) / 2.0 - side / 2.0
    offset_y = (vs.max() + vs.min()) / 2.0 - side / 2.0
    crop = CropTransform(scale, offset_x, offset_y)
    try:
        crop_K = CameraIntrinsics(K.fx * scale, K.fy * scale,
                                  (K.cx - offset_x) * scale, (K.cy - offset_y) * scale,
                                  out_size, out_size)
    except ValueError:
        return None, crop  # principal point far outside the crop: unusable view
    render = rasterize_coordinate_map(mesh, view.pose, crop_K)
    if render.empty:
        return None, crop
    return render, crop


def build_template_store(mesh: TriMesh, views: list[ViewSample], K: CameraIntrinsics,
                         out_dir, object_id: int = 1, pad: float = 1.2,
                         out_size: int = 224) -> dict:
    """Render and persist every view; returns the manifest (also written).

    Deterministic: identical inputs produce byte-identical stores. Views in
    which the object is invisible are flagged EMPTY_RENDER and carry no
    pixel files.
    """
    if len(mesh.triangles) == 0:
        raise InvalidMesh("cannot build templates for a mesh with zero triangles")
    directory = object_dir(out_dir, object_id)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"cannot create store directory {directory}: {e}") from e

    entries = []
    for k, view in enumerate(views):
        stem = f"view_{k:06d}"
        render, crop = _render_view_cropped(mesh, view, K, pad, out_size)
        flags = [] if render is not None else [EMPTY_RENDER]
        entry = {
            "index": k,
            "pose": _pose_to_json(view.pose),
            "icosa_level": view.icosa_level,
            "flags": flags,
            "crop": crop.to_dict() if crop is not None else None,
        }
        meta = dict(entry)
        meta["camera"] = _camera_to_json(K)
        try:
            if render is not None:
                coords = render.coord_map.copy()
                coords[~render.mask] = 0.0
                write_tensor(directory / f"{stem}.coord.zst6", quantize_nocs(coords))
                write_tensor(directory / f"{stem}.depth.zst6",
                             render.depth[:, :, None].astype(np.float32))
                Image.fromarray((render.mask * np.uint8(255))).save(
                    directory / f"{stem}.mask.png")
            _dump_json(meta, directory / f"{stem}.meta.json")
        except OSError as e:
            raise IoError(f"failed writing template files for {stem}: {e}") from e
        entries.append(entry)

    manifest = {
        "object_id": object_id,
        "out_size": out_size,
        "pad": pad,
        "camera": _camera_to_json(K),
        "mesh": {
            "bbox_min": [float(v) for v in mesh.bbox_min],
            "bbox_max": [float(v) for v in mesh.bbox_max],
            "diameter": float(mesh.diameter),
            "n_vertices": int(len(mesh.vertices)),
            "n_triangles": int(len(mesh.triangles)),
        },
        "views": entries,
    }
    try:
        _dump_json(manifest, directory / "manifest.json")
    except OSError as e:
        raise IoError(f"failed writing manifest: {e}") from e
    return manifest


def manifest_digest(manifest: dict) -> str:
    return hashlib.sha256(
        json.dumps(manifest, sort_keys=True).encode("utf-8")).hexdigest()


class TemplateStore:
    """Read access to one object's templates."""

    def __init__(self, directory: Path, manifest: dict):
        self.directory = Path(directory)
        self.manifest = manifest
        self.bounds = NocsBounds(
            np.array(manifest["mesh"]["bbox_min"], dtype=np.float64),
            np.array(manifest["mesh"]["bbox_max"], dtype=np.float64))
        self.diameter = float(manifest["mesh"]["diameter"])
        self.out_size = int(manifest["out_size"])
        self.records = [
            TemplateRecord(
                index=int(e["index"]),
                pose=_pose_from_json(e["pose"]),
                crop=CropTransform.from_dict(e["crop"]) if e["crop"] else CropTransform(1.0, 0.0, 0.0),
                icosa_level=int(e["icosa_level"]),
                flags=tuple(e["flags"]),
                directory=self.directory,
                bounds=self.bounds,
            )
            for e in manifest["views"]
        ]

    @classmethod
    def open(cls, store_root, object_id: int) -> "TemplateStore":
        directory = object_dir(store_root, object_id)
        manifest_path = directory / "manifest.json"
        if not manifest_path.exists():
            raise IoError(f"no template manifest at {manifest_path}")
        manifest = json.loads(manifest_path.read_text())
        return cls(directory, manifest)

    def usable_records(self, limit: int | None = None) -> list[TemplateRecord]:
        recs = self.records if limit is None else self.records[:limit]
        return [r for r in recs if r.usable]
