import json

import numpy as np
import pytest

from zeropose.bop_eval import (AR_LABEL, ContinuousSymmetry, ErrorReport,
                               ResultRecord, SymmetrySet, average_recall,
                               list_scene_ids, load_bop_scene, load_models_info,
                               pose_error_metrics, read_results_csv,
                               write_bop_scene, write_results_csv)
from zeropose.errors import EmptyReportSet, MissingFile, SchemaError
from zeropose.geometry import CameraIntrinsics, Pose, rotation_about_axis
from zeropose.procedural import make_blob, make_box

from conftest import random_pose


def brute_force_metrics(est, gt, pts, sym_poses, K):
    """Slow, direct double-loop implementations of all four metrics."""
    gt_cam = np.array([gt.rotation @ p + gt.translation for p in pts])

    def project(cam):
        return np.array([[K.fx * c[0] / c[2] + K.cx, K.fy * c[1] / c[2] + K.cy]
                         for c in cam])

    mssd = np.inf
    mspd = np.inf
    gt_px = project(gt_cam)
    for s in sym_poses:
        combined_r = est.rotation @ s.rotation
        combined_t = est.rotation @ s.translation + est.translation
        cam = np.array([combined_r @ p + combined_t for p in pts])
        d3 = max(np.linalg.norm(cam[i] - gt_cam[i]) for i in range(len(pts)))
        mssd = min(mssd, d3)
        px = project(cam)
        d2 = max(np.linalg.norm(px[i] - gt_px[i]) for i in range(len(pts)))
        mspd = min(mspd, d2)

    est_cam = np.array([est.rotation @ p + est.translation for p in pts])
    add = float(np.mean([np.linalg.norm(est_cam[i] - gt_cam[i])
                         for i in range(len(pts))]))
    adi = float(np.mean([min(np.linalg.norm(e - g) for g in gt_cam)
                         for e in est_cam]))
    return mssd, mspd, add, adi


def z_flip_symmetry():
    return SymmetrySet(discrete=(Pose.identity(),
                                 Pose(rotation_about_axis([0, 0, 1], np.pi),
                                      np.zeros(3))))


class TestSceneIo:
    def write_minimal_scene(self, split_dir):
        scene = split_dir / "000001"
        scene.mkdir(parents=True)
        (scene / "scene_camera.json").write_text(json.dumps({
            "0": {"cam_K": [500, 0, 320, 0, 500, 240, 0, 0, 1],
                  "width": 640, "height": 480}}))
        (scene / "scene_gt.json").write_text(json.dumps({
            "0": [{"cam_R_m2c": [1, 0, 0, 0, 1, 0, 0, 0, 1],
                   "cam_t_m2c": [0, 0, 700], "obj_id": 5}]}))
        return scene

    def test_minimal_scene(self, tmp_path):
        self.write_minimal_scene(tmp_path)
        anns = load_bop_scene(tmp_path, 1)
        assert len(anns) == 1
        cam = anns[0].camera
        assert (cam.fx, cam.fy, cam.cx, cam.cy) == (500, 500, 320, 240)
        inst = anns[0].gt[0]
        assert inst.obj_id == 5
        assert np.allclose(inst.pose.translation, [0, 0, 700])
        assert inst.mask_path.name == "000000_000000.png"

    def test_non_orthonormal_gt_rejected(self, tmp_path):
        scene = self.write_minimal_scene(tmp_path)
        bad = json.loads((scene / "scene_gt.json").read_text())
        bad["0"][0]["cam_R_m2c"] = [1, 0, 0, 0, 1, 0, 0, 0, 1.01]
        (scene / "scene_gt.json").write_text(json.dumps(bad))
        with pytest.raises(SchemaError):
            load_bop_scene(tmp_path, 1)

    def test_missing_key_named(self, tmp_path):
        scene = self.write_minimal_scene(tmp_path)
        bad = json.loads((scene / "scene_camera.json").read_text())
        del bad["0"]["cam_K"]
        (scene / "scene_camera.json").write_text(json.dumps(bad))
        with pytest.raises(SchemaError, match="cam_K"):
            load_bop_scene(tmp_path, 1)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingFile):
            load_bop_scene(tmp_path, 3)

    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        from zeropose.bop_eval import GtInstance, SceneAnnotation
        anns = [SceneAnnotation(
            scene_id=2, image_id=i,
            camera=CameraIntrinsics(500.0, 505.0, 320.0, 241.5, 640, 480),
            gt=tuple(GtInstance(obj_id=int(rng.integers(1, 5)),
                                pose=random_pose(rng),
                                mask_path=None)
                     for _ in range(2)))
            for i in range(3)]
        write_bop_scene(anns, tmp_path)
        back = load_bop_scene(tmp_path, 2)
        assert len(back) == 3
        for a, b in zip(anns, back):
            assert a.image_id == b.image_id
            assert a.camera == b.camera
            for ia, ib in zip(a.gt, b.gt):
                assert ia.obj_id == ib.obj_id
                assert np.abs(ia.pose.rotation - ib.pose.rotation).max() < 1e-12
                assert np.array_equal(ia.pose.translation, ib.pose.translation)
        assert list_scene_ids(tmp_path) == [2]


class TestModelsInfo:
    def test_load_with_symmetries(self, tmp_path):
        rz = rotation_about_axis([0, 0, 1], np.pi)
        info = {
            "1": {"diameter": 120.5,
                  "symmetries_discrete": [list(np.vstack([
                      np.hstack([rz, [[0], [0], [0]]]), [0, 0, 0, 1]]).reshape(-1))],
                  "symmetries_continuous": [{"axis": [0, 0, 1], "offset": [0, 0, 0]}]},
            "2": {"diameter": 80.0},
        }
        path = tmp_path / "models_info.json"
        path.write_text(json.dumps(info))
        models = load_models_info(path)
        assert models[1].diameter == 120.5
        assert len(models[1].symmetry.discrete) == 2
        assert len(models[1].symmetry.continuous) == 1
        assert len(models[2].symmetry.discrete) == 1
        expanded = models[2].symmetry.expand()
        assert len(expanded) == 1  # identity only


class TestMetrics:
    def test_perfect_estimate(self, camera):
        mesh = make_box()
        pose = random_pose(np.random.default_rng(1))
        rep = pose_error_metrics(pose, pose, mesh, SymmetrySet.none(), camera)
        assert rep.mssd_mm == 0.0
        assert rep.mspd_px == 0.0
        assert rep.add_mm == 0.0
        assert rep.adi_mm == 0.0
        assert rep.recall_mssd == 1.0 and rep.recall_mspd == 1.0

    def test_camera_x_translation_is_exact_mssd(self, camera):
        mesh = make_box()
        gt = random_pose(np.random.default_rng(2))
        est = Pose(gt.rotation, gt.translation + np.array([5.0, 0.0, 0.0]))
        rep = pose_error_metrics(est, gt, mesh, SymmetrySet.none(), camera)
        assert rep.mssd_mm == pytest.approx(5.0, abs=1e-9)
        assert rep.add_mm == pytest.approx(5.0, abs=1e-9)

    def test_symmetry_forgives_flip_but_add_does_not(self, camera):
        mesh = make_box((40.0, 40.0, 20.0))  # square footprint: z-flip symmetric
        sym = z_flip_symmetry()
        gt = random_pose(np.random.default_rng(3))
        est = gt.compose(sym.discrete[1])
        rep = pose_error_metrics(est, gt, mesh, sym, camera)
        assert rep.mssd_mm < 1e-9
        assert rep.mspd_px < 1e-6
        assert rep.add_mm > 1.0

    def test_matches_bruteforce_oracle(self, camera):
        rng = np.random.default_rng(4)
        mesh = make_blob(seed=30, level=1)  # 162 vertices
        sym_sets = [
            SymmetrySet.none(),
            z_flip_symmetry(),
            SymmetrySet(continuous=(ContinuousSymmetry(
                axis=np.array([0.0, 0.0, 1.0]), offset=np.zeros(3), steps=8),)),
        ]
        for _ in range(30):
            gt = random_pose(rng)
            est = Pose(gt.rotation @ rotation_about_axis(rng.normal(size=3), 0.1),
                       gt.translation + rng.normal(0, 5, 3))
            sym = sym_sets[rng.integers(0, len(sym_sets))]
            rep = pose_error_metrics(est, gt, mesh, sym, camera)
            bf = brute_force_metrics(est, gt, mesh.vertices, sym.expand(), camera)
            assert rep.mssd_mm == pytest.approx(bf[0], abs=1e-9)
            assert rep.mspd_px == pytest.approx(bf[1], abs=1e-9)
            assert rep.add_mm == pytest.approx(bf[2], abs=1e-9)
            assert rep.adi_mm == pytest.approx(bf[3], abs=1e-9)

    def test_symmetry_invariance_of_mssd(self, camera):
        mesh = make_blob(seed=31, level=1)
        sym = z_flip_symmetry()
        rng = np.random.default_rng(5)
        gt = random_pose(rng)
        est = Pose(gt.rotation, gt.translation + np.array([2.0, 1.0, -3.0]))
        base = pose_error_metrics(est, gt, mesh, sym, camera)
        swapped = pose_error_metrics(est.compose(sym.discrete[1]), gt, mesh, sym, camera)
        assert swapped.mssd_mm == pytest.approx(base.mssd_mm, abs=1e-9)
        assert swapped.mspd_px == pytest.approx(base.mspd_px, abs=1e-9)


class TestAverageRecall:
    def test_all_perfect(self):
        cam = CameraIntrinsics(500, 500, 320, 240, 640, 480)
        pose = Pose(np.eye(3), np.array([0.0, 0.0, 700.0]))
        reports = [pose_error_metrics(pose, pose, make_box(), SymmetrySet.none(), cam)
                   for _ in range(3)]
        summary = average_recall(reports)
        assert summary.ar == 1.0
        assert summary.label == AR_LABEL

    def test_hand_enumerated_thresholds(self):
        # mssd = 0.26 d passes 0.30..0.50 (5 of 10); mspd fails all
        from zeropose.bop_eval import _finalize_report
        rep = _finalize_report(mssd=26.0, mspd=1e9, add=0, adi=0,
                               diameter=100.0, width=640)
        assert rep.recall_mssd == pytest.approx(0.5)
        assert rep.recall_mspd == 0.0
        summary = average_recall([rep])
        assert summary.ar == pytest.approx(0.25)

    def test_missing_estimate_fails_everything(self):
        rep = ErrorReport.missing(100.0, 640)
        assert rep.recall_mssd == 0.0
        assert rep.recall_mspd == 0.0

    def test_thresholds_monotone(self):
        from zeropose.bop_eval import _finalize_report
        rep = _finalize_report(mssd=26.0, mspd=70.0, add=0, adi=0,
                               diameter=100.0, width=640)
        # once a threshold passes, every looser threshold passes too
        for passes in (rep.mssd_passes, rep.mspd_passes):
            seen_pass = False
            for p in passes:
                assert p or not seen_pass
                seen_pass = seen_pass or p

    def test_ar_monotone_in_errors(self):
        from zeropose.bop_eval import _finalize_report
        worse = _finalize_report(40.0, 30.0, 0, 0, 100.0, 640)
        better = _finalize_report(20.0, 10.0, 0, 0, 100.0, 640)
        assert average_recall([better]).ar >= average_recall([worse]).ar

    def test_mspd_width_scaling(self):
        from zeropose.bop_eval import _finalize_report
        narrow = _finalize_report(1e9, 12.0, 0, 0, 100.0, 640)   # r = 1
        wide = _finalize_report(1e9, 12.0, 0, 0, 100.0, 1280)    # r = 2
        # r = 1: 12 px passes thresholds 15..50 -> 8/10
        # r = 2: 12 px passes thresholds 20..100 -> 9/10
        assert narrow.recall_mspd == pytest.approx(0.8)
        assert wide.recall_mspd == pytest.approx(0.9)

    def test_empty_raises(self):
        with pytest.raises(EmptyReportSet):
            average_recall([])


class TestResultsCsv:
    def test_exact_identity_line(self, tmp_path):
        rec = ResultRecord(scene_id=1, im_id=1, obj_id=5, score=1.0,
                           pose=Pose(np.eye(3), np.array([0.0, 0.0, 1000.0])),
                           time_s=0.2)
        path = tmp_path / "r.csv"
        write_results_csv([rec], path)
        lines = path.read_text().splitlines()
        assert lines[0] == "scene_id,im_id,obj_id,score,R,t,time"
        assert lines[1] == "1,1,5,1,1 0 0 0 1 0 0 0 1,0 0 1000,0.2"

    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(6)
        recs = [ResultRecord(scene_id=int(rng.integers(1, 4)),
                             im_id=int(rng.integers(0, 10)),
                             obj_id=int(rng.integers(1, 6)),
                             score=float(rng.random()),
                             pose=random_pose(rng))
                for _ in range(12)]
        path = tmp_path / "rt.csv"
        write_results_csv(recs, path)
        back = read_results_csv(path)
        expect = sorted(recs, key=lambda r: (r.scene_id, r.im_id, r.obj_id))
        assert len(back) == len(expect)
        for a, b in zip(expect, back):
            assert (a.scene_id, a.im_id, a.obj_id) == (b.scene_id, b.im_id, b.obj_id)
            assert np.array_equal(a.pose.rotation, b.pose.rotation)
            assert np.array_equal(a.pose.translation, b.pose.translation)
            assert a.score == b.score

    def test_empty_list_header_only(self, tmp_path):
        path = tmp_path / "empty.csv"
        write_results_csv([], path)
        assert path.read_text() == "scene_id,im_id,obj_id,score,R,t,time\n"

    def test_deterministic_bytes(self, tmp_path):
        rng = np.random.default_rng(7)
        recs = [ResultRecord(1, i, 1, 1.0, random_pose(rng)) for i in range(5)]
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_results_csv(recs, a)
        write_results_csv(list(reversed(recs)), b)
        assert a.read_bytes() == b.read_bytes()
