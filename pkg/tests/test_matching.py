import numpy as np
import pytest

from zeropose.descriptors import (CropTransform, DescriptorGrid, GlobalDescriptor,
                                  oracle_descriptors, pool_global)
from zeropose.errors import DimMismatch, EmptyAfterFiltering, NoForeground
from zeropose.geometry import CameraIntrinsics, transform_and_project
from zeropose.matching import (lift_correspondences, match_template,
                               mutual_nearest_neighbors)
from zeropose.mesh import load_mesh, write_ply
from zeropose.procedural import make_blob
from zeropose.render import sample_viewpoints
from zeropose.template_store import TemplateStore, build_template_store


def unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


def make_grid(vectors, valid=None, rows=None, cols=None):
    """Pack a list of vectors into a 1 x N grid (or given shape)."""
    arr = np.asarray(vectors, float)
    n, d = arr.shape
    rows = rows or 1
    cols = cols or n
    data = arr.reshape(rows, cols, d)
    v = np.ones((rows, cols), bool) if valid is None else valid
    return DescriptorGrid.from_raw(data, v, patch_size=8, stride=8)


class TestMatchTemplate:
    def test_identical_template_wins(self):
        rng = np.random.default_rng(0)
        templates = [GlobalDescriptor.from_raw(rng.normal(size=16)) for _ in range(10)]
        query = GlobalDescriptor(templates[5].vec)
        ranked = match_template(query, templates)
        assert ranked[0].template_index == 5
        assert ranked[0].score == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_tie_breaks_to_lowest_index(self):
        e = np.eye(8)
        templates = [GlobalDescriptor.from_raw(e[i]) for i in range(4)]
        query = GlobalDescriptor.from_raw(e[7])
        ranked = match_template(query, templates)
        assert [m.template_index for m in ranked] == [0, 1, 2, 3]
        assert all(m.score == pytest.approx(0.0, abs=1e-12) for m in ranked)

    def test_matches_bruteforce_sort_oracle(self):
        rng = np.random.default_rng(1)
        templates = [GlobalDescriptor.from_raw(rng.normal(size=32)) for _ in range(300)]
        query = GlobalDescriptor.from_raw(rng.normal(size=32))
        ranked = match_template(query, templates)
        # oracle: explicit similarity list sorted by (-score, index)
        sims = [(float(t.vec @ query.vec), i) for i, t in enumerate(templates)]
        expect = sorted(range(300), key=lambda i: (-sims[i][0], i))
        assert [m.template_index for m in ranked] == expect

    def test_scale_invariance_before_normalization(self):
        rng = np.random.default_rng(2)
        raw = rng.normal(size=(20, 16))
        q_raw = rng.normal(size=16)
        a = match_template(GlobalDescriptor.from_raw(q_raw),
                           [GlobalDescriptor.from_raw(v) for v in raw])
        b = match_template(GlobalDescriptor.from_raw(3.7 * q_raw),
                           [GlobalDescriptor.from_raw(250.0 * v) for v in raw])
        assert [m.template_index for m in a] == [m.template_index for m in b]

    def test_dim_mismatch(self):
        q = GlobalDescriptor.from_raw(np.ones(8))
        t = GlobalDescriptor.from_raw(np.ones(16))
        with pytest.raises(DimMismatch):
            match_template(q, [t])


def mnn_bruteforce(grid_a, grid_b):
    """Exhaustive double-loop mutual-NN oracle over valid patches."""
    va, ia = grid_a.valid_vectors()
    vb, ib = grid_b.valid_vectors()
    pairs = []
    for a in range(len(va)):
        best_b, best_s = None, -np.inf
        for b in range(len(vb)):
            s = float(va[a] @ vb[b])
            if s > best_s:
                best_b, best_s = b, s
        back_a, back_s = None, -np.inf
        for a2 in range(len(va)):
            s = float(va[a2] @ vb[best_b])
            if s > back_s:
                back_a, back_s = a2, s
        if back_a == a:
            pairs.append((int(ia[a]), int(ib[best_b]), best_s))
    pairs.sort(key=lambda p: (-p[2], p[0], p[1]))
    return pairs


class TestMutualNN:
    def test_self_matching_identity(self):
        rng = np.random.default_rng(3)
        vecs = rng.normal(size=(9, 12))
        grid = make_grid(vecs, rows=3, cols=3)
        pairs = mutual_nearest_neighbors(grid, grid)
        assert len(pairs) == 9
        assert all(p.index_a == p.index_b for p in pairs)
        assert all(p.similarity == pytest.approx(1.0, abs=1e-6) for p in pairs)

    def test_constructed_exclusion(self):
        # NN(a) = a' but NN(a') = b, so (a, a') must not appear
        a = unit([1.0, 0.0, 0.0, 0.0])
        b = unit([0.8, 0.6, 0.0, 0.0])
        c = unit([0.0, 0.0, 1.0, 0.0])
        a2 = unit([0.9, 0.436, 0.0, 0.0])   # closest to b, still close to a
        b2 = unit([0.0, 1.0, 0.0, 0.0])
        c2 = unit([0.0, 0.0, 0.995, 0.0998])
        q = make_grid([a, b, c])
        p = make_grid([a2, b2, c2])
        pairs = mutual_nearest_neighbors(q, p)
        assert (0, 0) not in {(x.index_a, x.index_b) for x in pairs}
        assert [(x.index_a, x.index_b, pytest.approx(x.similarity)) for x in pairs] \
            == [(x[0], x[1], pytest.approx(x[2])) for x in mnn_bruteforce(q, p)]

    def test_matches_bruteforce_on_random_grids(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            q = make_grid(rng.normal(size=(12, 8)),
                          valid=rng.random((1, 12)) > 0.2, rows=1, cols=12)
            p = make_grid(rng.normal(size=(15, 8)),
                          valid=rng.random((1, 15)) > 0.2, rows=1, cols=15)
            got = [(x.index_a, x.index_b) for x in mutual_nearest_neighbors(q, p)]
            expect = [(x[0], x[1]) for x in mnn_bruteforce(q, p)]
            assert got == expect

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        q = make_grid(rng.normal(size=(10, 6)))
        p = make_grid(rng.normal(size=(13, 6)))
        ab = {(x.index_a, x.index_b) for x in mutual_nearest_neighbors(q, p)}
        ba = {(x.index_b, x.index_a) for x in mutual_nearest_neighbors(p, q)}
        assert ab == ba

    def test_cardinality_bounds(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            nq = rng.integers(1, 20)
            npats = rng.integers(1, 20)
            q = make_grid(rng.normal(size=(nq, 5)))
            p = make_grid(rng.normal(size=(npats, 5)))
            pairs = mutual_nearest_neighbors(q, p)
            assert 1 <= len(pairs) <= min(nq, npats)

    def test_errors(self):
        q = make_grid(np.eye(4))
        p = make_grid(np.eye(5))
        with pytest.raises(DimMismatch):
            mutual_nearest_neighbors(q, p)
        empty = DescriptorGrid.from_raw(np.zeros((1, 4, 4)),
                                        np.zeros((1, 4), bool), 8, 8)
        with pytest.raises(NoForeground):
            mutual_nearest_neighbors(q, empty)


@pytest.fixture(scope="module")
def blob_setup(tmp_path_factory):
    out = tmp_path_factory.mktemp("match_store")
    mesh_mem = make_blob(seed=21, level=2)
    mesh_path = out / "blob.ply"
    write_ply(mesh_mem, mesh_path)
    mesh = load_mesh(mesh_path)
    K = CameraIntrinsics(550, 550, 320, 240, 640, 480)
    views = sample_viewpoints(30, 2.5 * mesh.diameter)
    build_template_store(mesh, views, K, out, object_id=1)
    store = TemplateStore.open(out, 1)
    return mesh, K, store


def grid_for_record(record, dim=32):
    coords, mask = record.load_coord_map()
    return oracle_descriptors(coords, mask, 8, 8, dim)


class TestLift:
    def test_patch_center_through_identity_crop(self, blob_setup):
        mesh, K, store = blob_setup
        record = store.records[0]
        template_grid = grid_for_record(record)
        # query grid == template grid, identity crop: pure center arithmetic
        pairs = mutual_nearest_neighbors(template_grid, template_grid)
        corr = lift_correspondences(pairs, template_grid, template_grid, record,
                                    CropTransform(1.0, 0.0, 0.0), top_k=1000)
        lin = [p.index_a for p in pairs[:1000]]
        # first surviving pair's query pixel is its patch center
        i, j = divmod(lin[0], template_grid.cols)
        assert tuple(corr.query_px[0]) == (j * 8 + 4.0, i * 8 + 4.0)

    def test_background_center_uses_neighbor_or_drops(self, blob_setup):
        mesh, K, store = blob_setup
        record = store.records[1]
        coords, mask = record.load_coord_map()
        grid = grid_for_record(record)
        # run with all mutual pairs; every surviving object point is in-bbox fg
        pairs = mutual_nearest_neighbors(grid, grid)
        corr = lift_correspondences(pairs, grid, grid, record,
                                    CropTransform(1.0, 0.0, 0.0), top_k=len(pairs))
        assert np.all(corr.object_pts >= mesh.bbox_min - 1e-3)
        assert np.all(corr.object_pts <= mesh.bbox_max + 1e-3)
        assert len(corr) <= len(pairs)

    def test_top_k_truncation(self, blob_setup):
        _, _, store = blob_setup
        record = store.records[2]
        grid = grid_for_record(record)
        pairs = mutual_nearest_neighbors(grid, grid)
        corr = lift_correspondences(pairs, grid, grid, record,
                                    CropTransform(1.0, 0.0, 0.0), top_k=20)
        assert len(corr) <= 20

    def test_empty_after_filtering(self, blob_setup):
        _, _, store = blob_setup
        record = store.records[0]
        grid = grid_for_record(record)
        _, mask = record.load_coord_map()
        bg = np.flatnonzero(~mask[4::8, 4::8].reshape(-1))
        from zeropose.matching import PatchPair
        # fabricate pairs whose template centers all sit deep in background
        deep_bg = []
        for lin in bg:
            i, j = divmod(int(lin), grid.cols)
            y, x = i * 8 + 4, j * 8 + 4
            win = mask[max(0, y - 1):y + 2, max(0, x - 1):x + 2]
            if not win.any():
                deep_bg.append(int(lin))
            if len(deep_bg) == 3:
                break
        pairs = [PatchPair(0, lin, 0.9) for lin in deep_bg]
        with pytest.raises(EmptyAfterFiltering):
            lift_correspondences(pairs, grid, grid, record,
                                 CropTransform(1.0, 0.0, 0.0), top_k=10)

    def test_same_pose_query_reprojects(self, blob_setup):
        # query rendered at a template's exact pose: lifted 3D points must
        # reproject onto their query pixels within 2 * stride
        mesh, K, store = blob_setup
        from zeropose.render import rasterize_coordinate_map
        record = store.records[4]
        template_grid = grid_for_record(record)

        crop_K = CameraIntrinsics(K.fx * record.crop.scale, K.fy * record.crop.scale,
                                  (K.cx - record.crop.offset_x) * record.crop.scale,
                                  (K.cy - record.crop.offset_y) * record.crop.scale,
                                  224, 224)
        render = rasterize_coordinate_map(mesh, record.pose, crop_K)
        query_grid = oracle_descriptors(render, dim=32)
        pairs = mutual_nearest_neighbors(query_grid, template_grid)
        corr = lift_correspondences(pairs, query_grid, template_grid, record,
                                    record.crop, top_k=len(pairs))
        uv = transform_and_project(corr.object_pts, record.pose, K)
        err = np.linalg.norm(uv - corr.query_px, axis=1)
        assert (err <= 16.0).mean() >= 0.95

    def test_nearby_pose_mutual_nn_consistent(self, blob_setup):
        # oracle end-to-end: query from a held-out view vs its best template
        mesh, K, store = blob_setup
        from zeropose.geometry import look_at_pose
        from zeropose.render import rasterize_coordinate_map

        direction = unit([0.4, 0.5, 0.77])
        pose = look_at_pose(direction * 2.5 * mesh.diameter, [0, 0, 0])
        render_full = rasterize_coordinate_map(mesh, pose, K)
        from zeropose.descriptors import crop_and_resize
        from zeropose.pipeline import bbox_from_mask
        bbox = bbox_from_mask(render_full.mask)
        crop_coords, crop_mask, transform = crop_and_resize(
            render_full.coord_map, render_full.mask, bbox, 1.2, 224, mode="nearest")
        query_grid = oracle_descriptors(crop_coords, crop_mask, 8, 8, 32)
        query_global = pool_global(query_grid)

        entries = [(r, grid_for_record(r)) for r in store.usable_records()]
        globals_ = [pool_global(g) for _, g in entries]
        ranked = match_template(query_global, globals_)
        record, template_grid = entries[ranked[0].template_index]

        pairs = mutual_nearest_neighbors(query_grid, template_grid)
        corr = lift_correspondences(pairs, query_grid, template_grid, record,
                                    transform, top_k=len(pairs))
        uv = transform_and_project(corr.object_pts, pose, K)
        err = np.linalg.norm(uv - corr.query_px, axis=1)
        assert (err <= 16.0).mean() >= 0.90
