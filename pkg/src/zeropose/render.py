"""Viewpoint sampling on subdivided icosahedra and coordinate-map rendering.

Rendering produces per-pixel normalized object coordinates, depth and a
mask rather than shaded RGB: downstream matching only ever consumes
coordinate maps, so photorealism buys nothing here and a small z-buffer
rasterizer keeps templates bit-reproducible.

The per-triangle fill loop is the hot kernel. A compiled extension is used
when available and the numpy fallback otherwise; set ZEROPOSE_NO_NATIVE=1
to force the fallback (the benchmark in benchmarks/ compares the two).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import procedural
from .geometry import CameraIntrinsics, Pose, look_at_pose
from .mesh import TriMesh, nocs_encode

if os.environ.get("ZEROPOSE_NO_NATIVE"):
    from . import _raster_numpy as _kernel
    RASTER_BACKEND = "numpy"
else:
    try:
        from . import _rasterize as _kernel
        RASTER_BACKEND = "native"
    except ImportError:
        from . import _raster_numpy as _kernel
        RASTER_BACKEND = "numpy"

_ZNEAR_MM = 1e-6
BACKGROUND_COORD = -1.0


@dataclass(frozen=True)
class ViewSample:
    pose: Pose
    icosa_level: int
    index: int


@dataclass(frozen=True)
class RenderOutput:
    coord_map: np.ndarray  # (H, W, 3) float32; background = BACKGROUND_COORD
    depth: np.ndarray      # (H, W) float32 mm; background = 0
    mask: np.ndarray       # (H, W) bool

    @property
    def empty(self) -> bool:
        return not bool(self.mask.any())


def farthest_point_order(points: np.ndarray) -> np.ndarray:
    """Greedy farthest-point ordering of (N, 3) points, seeded at index 0.

    Prefix-stable: the first n entries are the selection for any smaller
    target count over the same point set.
    """
    n = len(points)
    order = np.empty(n, dtype=np.int64)
    order[0] = 0
    dist = np.linalg.norm(points - points[0], axis=1)
    dist[0] = -np.inf
    for k in range(1, n):
        nxt = int(np.argmax(dist))  # ties resolve to the lowest index
        order[k] = nxt
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
        dist[nxt] = -np.inf
    return order


def sample_viewpoints(n: int, radius_mm: float, up_hint=(0.0, 0.0, 1.0)) -> list[ViewSample]:
    """n camera poses looking at the origin from a radius_mm sphere.

    Vertices of the smallest subdivided icosahedron with at least n vertices,
    reduced to exactly n by farthest-point selection, so any prefix is itself
    a well-spread view set.
    """
    if n < 1:
        raise ValueError("need at least one viewpoint")
    if radius_mm <= 0:
        raise ValueError("sampling radius must be positive")
    level = 0
    while procedural.icosphere_vertex_count(level) < n:
        level += 1
    verts, _ = procedural.unit_icosphere(level)
    order = farthest_point_order(verts)[:n]
    views = []
    for i, vi in enumerate(order):
        eye = verts[vi] * radius_mm
        pose = look_at_pose(eye, np.zeros(3), up_hint=up_hint)
        views.append(ViewSample(pose=pose, icosa_level=level, index=i))
    return views


def min_angular_spacing_rad(views: list[ViewSample]) -> float:
    """Smallest angle between any two view directions (camera centers)."""
    centers = np.stack([v.pose.camera_center for v in views])
    dirs = centers / np.linalg.norm(centers, axis=1, keepdims=True)
    cos = np.clip(dirs @ dirs.T, -1.0, 1.0)
    np.fill_diagonal(cos, -1.0)
    return float(np.arccos(cos.max()))


def rasterize_coordinate_map(mesh: TriMesh, pose: Pose, K: CameraIntrinsics) -> RenderOutput:
    """Render the mesh's normalized object coordinates, depth and mask.

    Z-buffered, perspective-correct barycentric interpolation at pixel
    centers; no back-face culling, so thin or inverted meshes stay visible.
    Triangles with any vertex behind the near plane are skipped. An empty
    result is returned as a flag (RenderOutput.empty), not an error.
    """
    if K.width < 16 or K.height < 16:
        raise ValueError("render target must be at least 16 x 16 pixels")
    h, w = K.height, K.width
    coord = np.full((h, w, 3), BACKGROUND_COORD, dtype=np.float32)
    depth = np.zeros((h, w), dtype=np.float32)
    mask = np.zeros((h, w), dtype=np.uint8)
    if len(mesh.triangles) == 0:
        return RenderOutput(coord, depth, mask.astype(bool))

    cam = np.ascontiguousarray(pose.apply(mesh.vertices))
    vert_ok = np.ascontiguousarray((cam[:, 2] > _ZNEAR_MM).astype(np.uint8))
    z = np.where(cam[:, 2] > _ZNEAR_MM, cam[:, 2], 1.0)
    proj = np.empty((len(cam), 2))
    proj[:, 0] = K.fx * cam[:, 0] / z + K.cx
    proj[:, 1] = K.fy * cam[:, 1] / z + K.cy
    proj = np.ascontiguousarray(proj)

    attrs = np.ascontiguousarray(nocs_encode(mesh.vertices, mesh))
    tris = np.ascontiguousarray(mesh.triangles, dtype=np.int32)
    zbuf = np.full((h, w), np.inf)

    _kernel.fill_triangles(cam, proj, attrs, tris, vert_ok, coord, depth, mask, zbuf)
    return RenderOutput(coord, depth, mask.astype(bool))
