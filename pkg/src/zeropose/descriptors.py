"""Patch-descriptor containers, the binary tensor archive, and crops.

The tensor archive is the byte-level boundary between the core pipeline
and any external descriptor producer:

    bytes 0-3   magic "ZS6D"
    bytes 4-5   version, u16 little-endian, currently 1
    byte  6     dtype: 0 = float32, 1 = uint16
    byte  7     reserved, 0
    bytes 8-19  rows, cols, dim as u32 little-endian
    payload     rows * cols * dim values, row-major
    optional    u32 length + UTF-8 JSON metadata

Files are byte-deterministic: no timestamps, fixed field order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (BadMagic, EmptyBbox, NoForeground, TruncatedPayload,
                     UnsupportedVersion)

MAGIC = b"ZS6D"
VERSION = 1
_HEADER = struct.Struct("<4sHBBIII")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<u2")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.uint16): 1}


def write_tensor(path, array: np.ndarray, metadata: dict | None = None) -> None:
    """Write a (rows, cols, dim) float32 or uint16 array plus optional metadata."""
    arr = np.ascontiguousarray(array)
    if arr.ndim != 3:
        raise ValueError(f"tensor must be 3-dimensional, got shape {arr.shape}")
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {arr.dtype}; use float32 or uint16")
    rows, cols, dim = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, code, 0, rows, cols, dim))
        fh.write(arr.tobytes())
        if metadata is not None:
            blob = json.dumps(metadata, sort_keys=True).encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)


def read_tensor(path) -> tuple[np.ndarray, dict | None]:
    """Read a tensor file back; returns (array, metadata-or-None).

    float32 payloads round-trip bitwise through write_tensor/read_tensor.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedPayload(f"file shorter than the {_HEADER.size}-byte header")
    magic, version, code, _, rows, cols, dim = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagic(f"magic is {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"version field is {version}, expected {VERSION}")
    if code not in _DTYPES:
        raise UnsupportedVersion(f"dtype field is {code}, expected one of {sorted(_DTYPES)}")
    dtype = _DTYPES[code]
    n_bytes = rows * cols * dim * dtype.itemsize
    end = _HEADER.size + n_bytes
    if len(raw) < end:
        raise TruncatedPayload(
            f"payload needs {n_bytes} bytes for rows={rows} cols={cols} dim={dim}, "
            f"found {len(raw) - _HEADER.size}")
    arr = np.frombuffer(raw, dtype=dtype, count=rows * cols * dim,
                        offset=_HEADER.size).reshape(rows, cols, dim).copy()
    metadata = None
    trailing = raw[end:]
    if trailing:
        if len(trailing) < 4:
            raise TruncatedPayload("metadata length field is truncated")
        (mlen,) = struct.unpack_from("<I", trailing)
        if len(trailing) < 4 + mlen:
            raise TruncatedPayload(
                f"metadata block needs {mlen} bytes, found {len(trailing) - 4}")
        metadata = json.loads(trailing[4:4 + mlen].decode("utf-8"))
    return arr, metadata


# --- crops ---------------------------------------------------------------------

@dataclass(frozen=True)
class CropTransform:
    """Affine map between crop pixels and original-image pixels.

    to_crop(p) = (p - offset) * scale, to_original(q) = q / scale + offset.
    `scale` is crop pixels per original pixel; `offset` is the original-image
    position of the crop's top-left sample.
    """

    scale: float
    offset_x: float
    offset_y: float

    def to_crop(self, pts: np.ndarray) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64)
        return (p - np.array([self.offset_x, self.offset_y])) * self.scale

    def to_original(self, pts: np.ndarray) -> np.ndarray:
        q = np.asarray(pts, dtype=np.float64)
        return q / self.scale + np.array([self.offset_x, self.offset_y])

    def to_dict(self) -> dict:
        return {"scale": self.scale, "offset_x": self.offset_x, "offset_y": self.offset_y}

    @classmethod
    def from_dict(cls, d: dict) -> "CropTransform":
        return cls(float(d["scale"]), float(d["offset_x"]), float(d["offset_y"]))


def _sample_bilinear(grid: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Zero-padded bilinear lookup at continuous positions (integer = pixel center)."""
    h, w = grid.shape[:2]
    squeeze = grid.ndim == 2
    g = grid[:, :, None] if squeeze else grid
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]

    def fetch(xi, yi):
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        vals = g[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)].astype(np.float64)
        vals[~inside] = 0.0
        return vals

    out = (fetch(x0, y0) * (1 - fx) * (1 - fy) + fetch(x0 + 1, y0) * fx * (1 - fy)
           + fetch(x0, y0 + 1) * (1 - fx) * fy + fetch(x0 + 1, y0 + 1) * fx * fy)
    return out[..., 0] if squeeze else out


def _sample_nearest(grid: np.ndarray, xs, ys, fill=0):
    h, w = grid.shape[:2]
    xi = np.rint(xs).astype(np.int64)
    yi = np.rint(ys).astype(np.int64)
    inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    out = np.full((xs.shape + grid.shape[2:]), fill, dtype=grid.dtype)
    out[inside] = grid[yi[inside], xi[inside]]
    return out


def crop_and_resize(grid: np.ndarray, mask: np.ndarray | None, bbox, pad: float,
                    out_size: int, mode: str = "bilinear", fill=0):
    """Cut a padded square around `bbox` and resample it to out_size x out_size.

    bbox is (x0, y0, w, h) in pixels with x0/y0 at the box's top-left edge.
    The square side is pad * max(w, h) centered on the box; regions outside
    the source are zero-padded. The image is resampled bilinearly, masks and
    coordinate maps with mode="nearest" to keep labels crisp.

    Returns (crop, crop_mask_or_None, CropTransform).
    """
    if pad < 1.0:
        raise ValueError("pad factor must be >= 1.0")
    if out_size < 32:
        raise ValueError("out_size must be >= 32")
    x0, y0, w, h = (float(v) for v in bbox)
    if w <= 0 or h <= 0:
        raise EmptyBbox(f"bbox has non-positive size {w} x {h}")
    gh, gw = grid.shape[:2]
    if x0 + w <= 0 or y0 + h <= 0 or x0 >= gw or y0 >= gh:
        raise EmptyBbox("bbox does not intersect the image")

    side = pad * max(w, h)
    scale = out_size / side
    offset_x = x0 + w / 2.0 - side / 2.0
    offset_y = y0 + h / 2.0 - side / 2.0
    transform = CropTransform(scale, offset_x, offset_y)

    qs = np.arange(out_size, dtype=np.float64)
    xs = qs / scale + offset_x
    ys = qs / scale + offset_y
    xg, yg = np.meshgrid(xs, ys)

    if mode == "bilinear":
        crop = _sample_bilinear(grid, xg, yg)
    elif mode == "nearest":
        crop = _sample_nearest(grid, xg, yg, fill=fill)
    else:
        raise ValueError(f"unknown resampling mode '{mode}'")
    crop_mask = None
    if mask is not None:
        crop_mask = _sample_nearest(mask.astype(bool), xg, yg, fill=False)
    return crop, crop_mask, transform


# --- descriptor containers -------------------------------------------------------

@dataclass(frozen=True)
class DescriptorGrid:
    """Per-patch descriptors over a rows x cols grid of image patches.

    Valid rows are L2-normalized; invalid (background) rows are zero.
    """

    data: np.ndarray        # (rows, cols, dim) float32
    valid: np.ndarray       # (rows, cols) bool
    patch_size: int
    stride: int
    layer_tag: str = "unknown"

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    @classmethod
    def from_raw(cls, data, valid, patch_size, stride, layer_tag="unknown"):
        """Normalize valid rows, zero invalid ones, and freeze the arrays."""
        d = np.asarray(data, dtype=np.float32).copy()
        v = np.asarray(valid, dtype=bool).copy()
        if d.ndim != 3 or v.shape != d.shape[:2] or d.shape[0] * d.shape[1] == 0:
            raise ValueError(f"bad grid shapes {d.shape} / {v.shape}")
        norms = np.linalg.norm(d.reshape(-1, d.shape[2]), axis=1).reshape(v.shape)
        v &= norms > 1e-12
        d[v] /= norms[v][:, None]
        d[~v] = 0.0
        d.setflags(write=False)
        v.setflags(write=False)
        return cls(d, v, int(patch_size), int(stride), layer_tag)

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def valid_vectors(self) -> tuple[np.ndarray, np.ndarray]:
        """(vectors, linear_indices) for valid patches, in row-major order."""
        flat_valid = self.valid.reshape(-1)
        idx = np.flatnonzero(flat_valid)
        return self.data.reshape(-1, self.dim)[idx], idx

    def patch_center(self, linear_index: int) -> tuple[float, float]:
        """Center of the patch in crop pixels: (x, y)."""
        i, j = divmod(int(linear_index), self.cols)
        return (j * self.stride + self.patch_size / 2.0,
                i * self.stride + self.patch_size / 2.0)

    def save(self, path) -> None:
        """Write the grid and a companion '<stem>.valid.zst6' validity tensor."""
        path = Path(path)
        meta = {"patch_size": self.patch_size, "stride": self.stride,
                "layer_tag": self.layer_tag}
        write_tensor(path, self.data.astype(np.float32), metadata=meta)
        write_tensor(valid_companion_path(path),
                     self.valid.astype(np.uint16)[:, :, None])

    @classmethod
    def load(cls, path) -> "DescriptorGrid":
        """Read a stored grid verbatim (rows are trusted to be normalized;
        re-normalizing here would perturb bits on save/load round-trips)."""
        path = Path(path)
        data, meta = read_tensor(path)
        meta = meta or {}
        vpath = valid_companion_path(path)
        if vpath.exists():
            valid = read_tensor(vpath)[0][:, :, 0] > 0
        else:
            valid = np.linalg.norm(data, axis=2) > 1e-12
        data = np.ascontiguousarray(data, dtype=np.float32)
        norms = np.linalg.norm(data.reshape(-1, data.shape[2]), axis=1)
        bad = norms[valid.reshape(-1)]
        if len(bad) and np.abs(bad - 1.0).max() > 1e-4:
            raise ValueError(f"stored grid has non-unit valid rows (worst "
                             f"{np.abs(bad - 1.0).max():.2e}): {path}")
        data.setflags(write=False)
        valid = np.ascontiguousarray(valid, dtype=bool)
        valid.setflags(write=False)
        return cls(data, valid, int(meta.get("patch_size", 8)),
                   int(meta.get("stride", 8)), meta.get("layer_tag", "unknown"))


def valid_companion_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name.replace(".zst6", "") + ".valid.zst6")


@dataclass(frozen=True)
class GlobalDescriptor:
    vec: np.ndarray  # (dim,) float64, unit norm; files store float32

    def __post_init__(self):
        v = np.asarray(self.vec, dtype=np.float64).copy()
        n = float(np.linalg.norm(v))
        if abs(n - 1.0) > 1e-5:
            raise ValueError(f"global descriptor norm {n} is not 1")
        v.setflags(write=False)
        object.__setattr__(self, "vec", v)

    @property
    def dim(self) -> int:
        return self.vec.shape[0]

    @classmethod
    def from_raw(cls, vec) -> "GlobalDescriptor":
        v = np.asarray(vec, dtype=np.float64)
        n = np.linalg.norm(v)
        if n <= 1e-12:
            raise ValueError("cannot normalize a zero descriptor")
        return cls(v / n)

    def save(self, path) -> None:
        write_tensor(path, self.vec.reshape(1, 1, -1).astype(np.float32))

    @classmethod
    def load(cls, path) -> "GlobalDescriptor":
        data, _ = read_tensor(path)
        return cls.from_raw(data.reshape(-1))


def pool_global(grid: DescriptorGrid) -> GlobalDescriptor:
    """Foreground-masked mean of patch descriptors, L2-normalized."""
    vecs, _ = grid.valid_vectors()
    if len(vecs) == 0:
        raise NoForeground("descriptor grid has no valid patch to pool")
    return GlobalDescriptor.from_raw(vecs.astype(np.float64).mean(axis=0))


# --- synthetic descriptor oracle ---------------------------------------------------

def oracle_descriptors(render, mask: np.ndarray | None = None, patch_size: int = 8,
                       stride: int = 8, dim: int = 32) -> DescriptorGrid:
    """Model-free stand-in for a ViT: descriptors from object coordinates.

    Accepts either a render output object (anything with .coord_map/.mask)
    or an explicit (coord_map, mask) pair. Each foreground patch gets a
    fixed sinusoidal encoding of the normalized object coordinate under its
    center pixel (frequencies 1, 2, 4, ... per channel), L2-normalized.
    Because the encoding depends only on the surface point, two views of the
    same point yield identical descriptors, which is exactly the property a
    perfect feature extractor would have.
    """
    if mask is None:
        coord_map, mask = render.coord_map, render.mask
    else:
        coord_map = np.asarray(render)
    if dim < 6:
        raise ValueError("oracle descriptor dim must be >= 6")
    h, w = mask.shape
    if not mask.any():
        raise NoForeground("render has no foreground pixel")
    rows = (h - patch_size) // stride + 1
    cols = (w - patch_size) // stride + 1
    if rows <= 0 or cols <= 0:
        raise ValueError("patch grid is empty for this image size")

    cy = np.arange(rows) * stride + patch_size // 2
    cx = np.arange(cols) * stride + patch_size // 2
    yy, xx = np.meshgrid(cy, cx, indexing="ij")
    valid = mask[yy, xx]
    coords = coord_map[yy, xx]  # (rows, cols, 3)

    n_freq = dim // 6
    freqs = 2.0 ** np.arange(n_freq)
    # phase[..., c, k] = 2 pi * freqs[k] * coords[..., c]
    phase = 2.0 * np.pi * coords[..., :, None] * freqs
    feats = np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)
    data = np.zeros((rows, cols, dim), dtype=np.float64)
    data[..., :6 * n_freq] = feats.reshape(rows, cols, -1)
    return DescriptorGrid.from_raw(data, valid, patch_size, stride, layer_tag="oracle")
