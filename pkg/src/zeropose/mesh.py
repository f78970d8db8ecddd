"""Triangle meshes, PLY loading and the colored object-coordinate encoding.

A surface point p is encoded as c = (p - bbox_min) / (bbox_max - bbox_min),
one channel per axis, so decoding a pixel of a coordinate map turns it back
into a 3D point in the object frame. Stored maps quantize each channel to
16 bits, which keeps the round-trip error below extent/65535 per axis.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidMesh, OutOfBounds, ParseError, UnsupportedFormat

EXACT_DIAMETER_LIMIT = 20_000  # vertices; above this the diameter is approximated
_BBOX_TOL_MM = 1e-6
NOCS_QUANT = 65535  # 16-bit quantization levels


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray      # (N, 3) float64, mm
    triangles: np.ndarray     # (M, 3) int32 vertex indices
    bbox_min: np.ndarray      # (3,)
    bbox_max: np.ndarray      # (3,)
    diameter: float           # mm, max pairwise vertex distance
    diameter_is_exact: bool = field(default=True)

    @classmethod
    def from_arrays(cls, vertices, triangles) -> "TriMesh":
        v = np.ascontiguousarray(np.asarray(vertices, dtype=np.float64))
        t = np.ascontiguousarray(np.asarray(triangles, dtype=np.int32))
        if v.ndim != 2 or v.shape[1] != 3:
            raise InvalidMesh(f"vertices must be (N, 3), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3:
            raise InvalidMesh(f"triangles must be (M, 3), got {t.shape}")
        if len(v) == 0:
            raise InvalidMesh("mesh has no vertices")
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise InvalidMesh("triangle index out of range")
        diameter, exact = _diameter(v)
        v.setflags(write=False)
        t.setflags(write=False)
        bmin = v.min(axis=0)
        bmax = v.max(axis=0)
        bmin.setflags(write=False)
        bmax.setflags(write=False)
        return cls(v, t, bmin, bmax, diameter, exact)

    @property
    def extent(self) -> np.ndarray:
        return self.bbox_max - self.bbox_min


def _pairwise_max_dist(pts: np.ndarray) -> float:
    best = 0.0
    step = max(1, int(2e7) // max(len(pts), 1))
    for lo in range(0, len(pts), step):
        block = pts[lo:lo + step]
        d2 = ((block[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))


def _diameter(pts: np.ndarray) -> tuple[float, bool]:
    """Max pairwise distance; exact below EXACT_DIAMETER_LIMIT vertices."""
    if len(pts) == 1:
        return 0.0, True
    if len(pts) <= EXACT_DIAMETER_LIMIT:
        return _pairwise_max_dist(pts), True
    stride = int(np.ceil(len(pts) / EXACT_DIAMETER_LIMIT))
    sub = pts[::stride]
    try:
        from scipy.spatial import ConvexHull
        sub = sub[ConvexHull(sub).vertices]
    except Exception:
        pass  # degenerate (flat) clouds: fall through to the plain scan
    return _pairwise_max_dist(sub), False


# --- colored object coordinates ----------------------------------------------

def nocs_encode(points, mesh: TriMesh) -> np.ndarray:
    """Map (..., 3) object points, mm, to normalized [0, 1]^3 coordinates.

    Degenerate axes (zero bounding-box extent) encode to 0.5. Points more
    than 1e-6 mm outside the box raise OutOfBounds.
    """
    pts = np.asarray(points, dtype=np.float64)
    if np.any(pts < mesh.bbox_min - _BBOX_TOL_MM) or np.any(pts > mesh.bbox_max + _BBOX_TOL_MM):
        raise OutOfBounds("point outside mesh bounding box")
    extent = mesh.extent
    safe = np.where(extent > 0, extent, 1.0)
    out = (pts - mesh.bbox_min) / safe
    out = np.where(extent > 0, out, 0.5)
    return np.clip(out, 0.0, 1.0)


def nocs_decode(coords, mesh: TriMesh) -> np.ndarray:
    """Inverse of nocs_encode: (..., 3) values in [0, 1] back to mm points."""
    c = np.asarray(coords, dtype=np.float64)
    if np.any(c < -1e-9) or np.any(c > 1.0 + 1e-9):
        raise OutOfBounds("coordinate component outside [0, 1]")
    extent = mesh.extent
    out = mesh.bbox_min + np.clip(c, 0.0, 1.0) * extent
    return np.where(extent > 0, out, mesh.bbox_min)


def quantize_nocs(coords: np.ndarray) -> np.ndarray:
    """[0, 1] float coordinates -> uint16 levels."""
    return np.round(np.clip(coords, 0.0, 1.0) * NOCS_QUANT).astype(np.uint16)


def dequantize_nocs(levels: np.ndarray) -> np.ndarray:
    return levels.astype(np.float64) / NOCS_QUANT


# --- PLY ----------------------------------------------------------------------

_PLY_SCALAR = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _parse_header(fh):
    magic = fh.readline()
    if magic.strip() != b"ply":
        raise UnsupportedFormat("not a PLY file (missing 'ply' magic line)")
    fmt = None
    elements = []  # (name, count, [(prop_name, type) or ('list', count_t, idx_t, name)])
    while True:
        raw = fh.readline()
        if not raw:
            raise ParseError("header ended before end_header")
        line = raw.decode("ascii", errors="replace").strip()
        if not line or line.startswith(("comment", "obj_info")):
            continue
        if line == "end_header":
            break
        tokens = line.split()
        if tokens[0] == "format":
            if tokens[1] == "ascii":
                fmt = "ascii"
            elif tokens[1] == "binary_little_endian":
                fmt = "binary"
            else:
                raise UnsupportedFormat(f"unsupported PLY format '{tokens[1]}'")
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise ParseError("property declared before any element")
            if tokens[1] == "list":
                elements[-1][2].append(("list", tokens[2], tokens[3], tokens[4]))
            else:
                elements[-1][2].append((tokens[2], tokens[1]))
    if fmt is None:
        raise ParseError("header missing format line")
    return fmt, elements


def _read_ascii_body(fh, elements):
    data = {}
    for name, count, props in elements:
        rows = []
        for k in range(count):
            raw = fh.readline()
            if not raw:
                raise ParseError(f"truncated '{name}' element: expected {count} rows, got {k}")
            rows.append(raw.split())
        data[name] = (rows, props)
    return data


def load_mesh(path) -> TriMesh:
    """Load an ASCII or binary-little-endian PLY mesh (positions + faces).

    Normals, colors and any extra per-vertex properties are skipped. Faces
    with more than three vertices are fan-triangulated.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        names = [e[0] for e in elements]
        if "vertex" not in names:
            raise ParseError("missing 'vertex' element")
        if "face" not in names:
            raise ParseError("missing 'face' element")

        if fmt == "ascii":
            body = _read_ascii_body(fh, elements)
            vertices = _ascii_vertices(*body["vertex"])
            triangles = _ascii_faces(*body["face"])
        else:
            buf = fh.read()
            offset = 0
            vertices = triangles = None
            for name, count, props in elements:
                if name == "vertex":
                    vertices, offset = _binary_vertices(buf, offset, count, props)
                elif name == "face":
                    triangles, offset = _binary_faces(buf, offset, count, props)
                else:
                    offset = _skip_binary_element(buf, offset, count, props, name)
    return TriMesh.from_arrays(vertices, triangles)


def _ascii_vertices(rows, props):
    cols = {}
    idx = 0
    for p in props:
        if p[0] == "list":
            raise ParseError("list property on vertex element is unsupported")
        cols[p[0]] = idx
        idx += 1
    for axis in ("x", "y", "z"):
        if axis not in cols:
            raise ParseError(f"vertex element missing property '{axis}'")
    out = np.empty((len(rows), 3))
    for i, row in enumerate(rows):
        if len(row) < idx:
            raise ParseError(f"vertex row {i} has {len(row)} values, expected {idx}")
        out[i] = (float(row[cols["x"]]), float(row[cols["y"]]), float(row[cols["z"]]))
    return out


def _triangulate(indices, tris, row):
    if len(indices) < 3:
        raise ParseError(f"face row {row} has fewer than 3 vertices")
    for a in range(1, len(indices) - 1):
        tris.append((indices[0], indices[a], indices[a + 1]))


def _ascii_faces(rows, props):
    if not props or props[0][0] != "list":
        raise ParseError("face element must start with a list property")
    tris = []
    for i, row in enumerate(rows):
        n = int(row[0])
        if len(row) < 1 + n:
            raise ParseError(f"face row {i} declares {n} indices but has {len(row) - 1}")
        _triangulate([int(v) for v in row[1:1 + n]], tris, i)
    return np.array(tris, dtype=np.int64).reshape(-1, 3)


def _vertex_dtype(props):
    fields = []
    for p in props:
        if p[0] == "list":
            raise ParseError("list property on vertex element is unsupported")
        name, typ = p
        if typ not in _PLY_SCALAR:
            raise ParseError(f"unknown property type '{typ}'")
        fields.append((name, "<" + _PLY_SCALAR[typ]))
    return np.dtype(fields)


def _binary_vertices(buf, offset, count, props):
    dt = _vertex_dtype(props)
    end = offset + dt.itemsize * count
    if end > len(buf):
        raise ParseError(
            f"truncated 'vertex' element: need {dt.itemsize * count} bytes, "
            f"have {len(buf) - offset}")
    rec = np.frombuffer(buf, dtype=dt, count=count, offset=offset)
    for axis in ("x", "y", "z"):
        if axis not in dt.names:
            raise ParseError(f"vertex element missing property '{axis}'")
    out = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    return out, end


def _binary_faces(buf, offset, count, props):
    if not props or props[0][0] != "list":
        raise ParseError("face element must start with a list property")
    _, count_t, index_t, _ = props[0]
    if len(props) > 1:
        raise ParseError("extra face properties are unsupported")
    cnt_fmt = "<" + {"i1": "b", "u1": "B", "i2": "h", "u2": "H",
                     "i4": "i", "u4": "I"}[_PLY_SCALAR[count_t]]
    idx_np = np.dtype("<" + _PLY_SCALAR[index_t])
    cnt_size = struct.calcsize(cnt_fmt)
    tris = []
    for i in range(count):
        if offset + cnt_size > len(buf):
            raise ParseError(f"truncated 'face' element at row {i}")
        n = struct.unpack_from(cnt_fmt, buf, offset)[0]
        offset += cnt_size
        end = offset + n * idx_np.itemsize
        if end > len(buf):
            raise ParseError(f"truncated 'face' element at row {i}")
        idx = np.frombuffer(buf, dtype=idx_np, count=n, offset=offset)
        offset = end
        _triangulate([int(v) for v in idx], tris, i)
    return np.array(tris, dtype=np.int64).reshape(-1, 3), offset


def _skip_binary_element(buf, offset, count, props, name):
    if any(p[0] == "list" for p in props):
        raise ParseError(f"cannot skip element '{name}' with list properties")
    size = _vertex_dtype(props).itemsize * count
    if offset + size > len(buf):
        raise ParseError(f"truncated '{name}' element")
    return offset + size


def write_ply(mesh: TriMesh, path, binary: bool = True) -> None:
    """Write positions and triangle faces, either binary-little-endian or ASCII."""
    path = Path(path)
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property double x",
        "property double y",
        "property double z",
        f"element face {len(mesh.triangles)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(mesh.vertices.astype("<f8").tobytes())
            counts = np.full((len(mesh.triangles), 1), 3, dtype=np.uint8)
            faces = mesh.triangles.astype("<i4")
            for c, f in zip(counts, faces):
                fh.write(c.tobytes())
                fh.write(f.tobytes())
        else:
            for v in mesh.vertices:
                fh.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n".encode("ascii"))
            for t in mesh.triangles:
                fh.write(f"3 {t[0]} {t[1]} {t[2]}\n".encode("ascii"))
