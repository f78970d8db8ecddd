"""Template retrieval, mutual-nearest-neighbor patch matching and lifting
matches to 2D-3D correspondences through template coordinate maps.

Grids are at most 28 x 28 = 784 patches, so every search is exhaustive;
an approximate index would only add failure modes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .descriptors import CropTransform, DescriptorGrid, GlobalDescriptor
from .errors import DimMismatch, EmptyAfterFiltering, NoForeground
from .mesh import nocs_decode
from .template_store import TemplateRecord


@dataclass(frozen=True)
class TemplateMatch:
    template_index: int
    score: float  # cosine similarity of unit vectors, in [-1, 1]


class PatchPair(NamedTuple):
    index_a: int      # linear patch index in the first grid
    index_b: int      # linear patch index in the second grid
    similarity: float


@dataclass(frozen=True)
class CorrespondenceSet:
    """2D query pixels paired with 3D object-frame points, mm."""

    query_px: np.ndarray    # (K, 2) pixels in the original query image
    object_pts: np.ndarray  # (K, 3) mm
    similarities: np.ndarray  # (K,)
    source_template: int

    def __len__(self) -> int:
        return len(self.query_px)


def match_template(query: GlobalDescriptor,
                   templates: list[GlobalDescriptor]) -> list[TemplateMatch]:
    """Rank all templates by cosine similarity to the query, best first.

    Ties break toward the lower template index; the top entry is the
    argmax-similarity template used for local matching.
    """
    if not templates:
        raise ValueError("template list is empty")
    dims = {t.dim for t in templates}
    if len(dims) != 1 or query.dim not in dims:
        raise DimMismatch(f"descriptor dims differ: query {query.dim}, templates {dims}")
    mat = np.stack([t.vec for t in templates]).astype(np.float64)
    scores = mat @ query.vec.astype(np.float64)
    order = np.argsort(-scores, kind="stable")
    return [TemplateMatch(int(i), float(scores[i])) for i in order]


def mutual_nearest_neighbors(grid_a: DescriptorGrid,
                             grid_b: DescriptorGrid) -> list[PatchPair]:
    """Patch pairs that are each other's nearest neighbor by cosine.

    Only valid (foreground) patches participate. Nearest-neighbor ties break
    toward the lower linear patch index. The result is sorted by descending
    pair similarity (then ascending indices) and is symmetric: swapping the
    arguments swaps the pair roles but keeps the same set.
    """
    if grid_a.dim != grid_b.dim:
        raise DimMismatch(f"grid dims differ: {grid_a.dim} vs {grid_b.dim}")
    va, ia = grid_a.valid_vectors()
    vb, ib = grid_b.valid_vectors()
    if len(va) == 0 or len(vb) == 0:
        raise NoForeground("both grids need at least one valid patch")
    sim = va.astype(np.float64) @ vb.astype(np.float64).T
    nn_ab = np.argmax(sim, axis=1)  # first occurrence wins ties: lowest index
    nn_ba = np.argmax(sim, axis=0)
    mutual = np.flatnonzero(nn_ba[nn_ab] == np.arange(len(va)))
    pairs = [PatchPair(int(ia[a]), int(ib[nn_ab[a]]), float(sim[a, nn_ab[a]]))
             for a in mutual]
    pairs.sort(key=lambda p: (-p.similarity, p.index_a, p.index_b))
    return pairs


def _nearest_foreground(mask: np.ndarray, x: int, y: int) -> tuple[int, int] | None:
    """Closest foreground pixel within the 3 x 3 neighborhood, or None."""
    h, w = mask.shape
    best = None
    best_d2 = 10
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            xx, yy = x + dx, y + dy
            if 0 <= xx < w and 0 <= yy < h and mask[yy, xx]:
                d2 = dx * dx + dy * dy
                if d2 < best_d2:
                    best_d2 = d2
                    best = (xx, yy)
    return best


def lift_correspondences(pairs: list[PatchPair], query_grid: DescriptorGrid,
                         template_grid: DescriptorGrid, template: TemplateRecord,
                         query_crop: CropTransform, top_k: int = 20) -> CorrespondenceSet:
    """Turn the top_k most similar patch pairs into (query px, 3D point) pairs.

    Pair roles: index_a addresses query_grid, index_b addresses template_grid.
    The query patch center goes through query_crop back to original-image
    pixels; the template patch center indexes the template's coordinate map,
    falling back to the nearest foreground pixel in a 3 x 3 window when the
    exact center lies on background (silhouette patches). Pairs without any
    nearby foreground are dropped.
    """
    if not pairs:
        raise EmptyAfterFiltering("no patch pairs to lift")
    coord_map, mask = template.load_coord_map()
    kept = pairs[:max(0, int(top_k))]

    query_px = []
    object_pts = []
    sims = []
    for pair in kept:
        qx, qy = query_grid.patch_center(pair.index_a)
        tx, ty = template_grid.patch_center(pair.index_b)
        txi, tyi = int(round(tx)), int(round(ty))
        if not (0 <= txi < mask.shape[1] and 0 <= tyi < mask.shape[0]):
            continue
        if not mask[tyi, txi]:
            hit = _nearest_foreground(mask, txi, tyi)
            if hit is None:
                continue
            txi, tyi = hit
        point = nocs_decode(coord_map[tyi, txi].astype(np.float64), template.bounds)
        query_px.append(query_crop.to_original(np.array([qx, qy])))
        object_pts.append(point)
        sims.append(pair.similarity)

    if not query_px:
        raise EmptyAfterFiltering("every pair fell on template background")
    return CorrespondenceSet(
        query_px=np.array(query_px, dtype=np.float64),
        object_pts=np.array(object_pts, dtype=np.float64),
        similarities=np.array(sims, dtype=np.float64),
        source_template=template.index,
    )
