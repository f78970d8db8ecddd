"""Procedural test meshes: icospheres, boxes and seeded asymmetric blobs.

These power the model-free self-test and the rasterizer checks; none of
them require any asset on disk.
"""

from __future__ import annotations

import numpy as np

from .mesh import TriMesh


def icosahedron() -> tuple[np.ndarray, np.ndarray]:
    """Unit icosahedron: (12, 3) vertices on the sphere and (20, 3) faces."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    return verts, faces


def unit_icosphere(level: int) -> tuple[np.ndarray, np.ndarray]:
    """Subdivided icosahedron on the unit sphere (10 * 4^level + 2 vertices).

    Subdivision order is deterministic, so vertex indexing is stable across
    runs and processes.
    """
    if level < 0:
        raise ValueError("subdivision level must be >= 0")
    verts, faces = icosahedron()
    verts = [v for v in verts]
    for _ in range(level):
        midpoint: dict[tuple[int, int], int] = {}

        def midpoint_index(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in midpoint:
                m = verts[a] + verts[b]
                m /= np.linalg.norm(m)
                midpoint[key] = len(verts)
                verts.append(m)
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab = midpoint_index(a, b)
            bc = midpoint_index(b, c)
            ca = midpoint_index(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = np.array(new_faces, dtype=np.int64)
    return np.array(verts), faces


def icosphere_vertex_count(level: int) -> int:
    return 10 * 4 ** level + 2


def make_icosphere(level: int = 2, radius_mm: float = 50.0) -> TriMesh:
    verts, faces = unit_icosphere(level)
    return TriMesh.from_arrays(verts * radius_mm, faces)


def make_box(extents_mm=(60.0, 40.0, 25.0)) -> TriMesh:
    """Axis-aligned box centered at the origin, 12 triangles."""
    e = np.asarray(extents_mm, dtype=np.float64) / 2.0
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)])
    verts = corners * e
    faces = np.array([
        [0, 1, 3], [0, 3, 2],  # -x
        [4, 6, 7], [4, 7, 5],  # +x
        [0, 4, 5], [0, 5, 1],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [0, 2, 6], [0, 6, 4],  # -z
        [1, 5, 7], [1, 7, 3],  # +z
    ], dtype=np.int64)
    return TriMesh.from_arrays(verts, faces)


def make_blob(seed: int = 0, level: int = 3, base_radius_mm: float = 60.0,
              bump: float = 0.25) -> TriMesh:
    """Seeded asymmetric star-shaped blob: an icosphere with a smooth,
    low-frequency radial modulation. Asymmetry matters so that recovered
    poses are unique."""
    rng = np.random.default_rng(seed)
    verts, faces = unit_icosphere(level)
    modulation = np.zeros(len(verts))
    for _ in range(5):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        freq = rng.uniform(1.0, 3.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        modulation += rng.uniform(0.3, 1.0) * np.sin(freq * (verts @ axis) * np.pi + phase)
    modulation /= max(np.abs(modulation).max(), 1e-9)
    radii = base_radius_mm * (1.0 + bump * modulation)
    return TriMesh.from_arrays(verts * radii[:, None], faces)
