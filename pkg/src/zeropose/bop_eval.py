"""BOP-format dataset ingestion, pose-error metrics and recall aggregation.

Metrics follow the BOP toolkit conventions: MSSD/MSPD minimize over the
object's symmetry transforms, ADD/ADI are the classic mean surface
distances. Average Recall here aggregates MSSD and MSPD only and is labeled
accordingly; the depth-based VSD component needs test depth images that
this artifact deliberately does not consume.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyReportSet, IoError, MissingFile, SchemaError
from .geometry import CameraIntrinsics, Pose, rotation_about_axis
from .mesh import TriMesh

AR_LABEL = "AR(MSSD,MSPD)"
MSSD_THRESHOLDS = tuple(0.05 * k for k in range(1, 11))   # fractions of diameter
MSPD_THRESHOLDS = tuple(5.0 * k for k in range(1, 11))    # px at 640 px width
METRIC_MAX_VERTICES = 10_000
_DEFAULT_IMAGE_SIZE = (640, 480)
_GT_ORTHO_TOL = 1e-3


# --- annotations --------------------------------------------------------------------


@dataclass(frozen=True)
class GtInstance:
    obj_id: int
    pose: Pose
    mask_path: Path | None = None


@dataclass(frozen=True)
class SceneAnnotation:
    scene_id: int
    image_id: int
    camera: CameraIntrinsics
    gt: tuple[GtInstance, ...]


def _orthonormalized(r: np.ndarray, context: str) -> np.ndarray:
    err = np.abs(r.T @ r - np.eye(3)).max()
    if err > _GT_ORTHO_TOL:
        raise SchemaError(f"{context}: rotation not orthonormal (|R^T R - I|_inf = {err:.2e})")
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        raise SchemaError(f"{context}: rotation is a reflection")
    return out


def _require(d: dict, key: str, context: str):
    if key not in d:
        raise SchemaError(f"{context}: missing key '{key}'")
    return d[key]


def _image_size(scene_dir: Path, image_id: int, cam_entry: dict) -> tuple[int, int]:
    if "width" in cam_entry and "height" in cam_entry:
        return int(cam_entry["width"]), int(cam_entry["height"])
    for sub, suffix in (("rgb", ".png"), ("rgb", ".jpg"), ("gray", ".tif")):
        p = scene_dir / sub / f"{image_id:06d}{suffix}"
        if p.exists():
            from PIL import Image
            with Image.open(p) as im:
                return im.size
    return _DEFAULT_IMAGE_SIZE


def load_bop_scene(split_dir, scene_id: int) -> list[SceneAnnotation]:
    """Parse one scene of a BOP split directory into per-image annotations.

    Needs scene_camera.json and scene_gt.json in <split>/<scene, 6 digits>/;
    per-instance visible masks resolve to mask_visib/<im>_<gt>.png (their
    existence is checked at use, not load).
    """
    scene_dir = Path(split_dir) / f"{scene_id:06d}"
    cam_path = scene_dir / "scene_camera.json"
    gt_path = scene_dir / "scene_gt.json"
    for p in (cam_path, gt_path):
        if not p.exists():
            raise MissingFile(str(p))
    cameras = json.loads(cam_path.read_text())
    gts = json.loads(gt_path.read_text())

    annotations = []
    for key in sorted(cameras, key=int):
        image_id = int(key)
        cam_entry = cameras[key]
        ctx = f"scene {scene_id} image {image_id}"
        k9 = np.array(_require(cam_entry, "cam_K", ctx), dtype=np.float64).reshape(3, 3)
        width, height = _image_size(scene_dir, image_id, cam_entry)
        camera = CameraIntrinsics(float(k9[0, 0]), float(k9[1, 1]),
                                  float(k9[0, 2]), float(k9[1, 2]), width, height)
        instances = []
        for g, inst in enumerate(gts.get(key, [])):
            r = np.array(_require(inst, "cam_R_m2c", ctx), dtype=np.float64).reshape(3, 3)
            t = np.array(_require(inst, "cam_t_m2c", ctx), dtype=np.float64)
            pose = Pose(_orthonormalized(r, f"{ctx} gt {g}"), t)
            instances.append(GtInstance(
                obj_id=int(_require(inst, "obj_id", ctx)),
                pose=pose,
                mask_path=scene_dir / "mask_visib" / f"{image_id:06d}_{g:06d}.png",
            ))
        annotations.append(SceneAnnotation(scene_id, image_id, camera, tuple(instances)))
    return annotations


def write_bop_scene(annotations: list[SceneAnnotation], split_dir) -> None:
    """Inverse of load_bop_scene for the json files (masks are written elsewhere)."""
    by_scene: dict[int, list[SceneAnnotation]] = {}
    for ann in annotations:
        by_scene.setdefault(ann.scene_id, []).append(ann)
    for scene_id, anns in by_scene.items():
        scene_dir = Path(split_dir) / f"{scene_id:06d}"
        scene_dir.mkdir(parents=True, exist_ok=True)
        cameras = {}
        gts = {}
        for ann in anns:
            key = str(ann.image_id)
            cameras[key] = {
                "cam_K": [float(v) for v in ann.camera.matrix.reshape(-1)],
                "depth_scale": 1.0,
                "width": ann.camera.width,
                "height": ann.camera.height,
            }
            gts[key] = [
                {"cam_R_m2c": [float(v) for v in inst.pose.rotation.reshape(-1)],
                 "cam_t_m2c": [float(v) for v in inst.pose.translation],
                 "obj_id": inst.obj_id}
                for inst in ann.gt
            ]
        (scene_dir / "scene_camera.json").write_text(json.dumps(cameras, sort_keys=True, indent=1))
        (scene_dir / "scene_gt.json").write_text(json.dumps(gts, sort_keys=True, indent=1))


def list_scene_ids(split_dir) -> list[int]:
    split_dir = Path(split_dir)
    if not split_dir.is_dir():
        raise MissingFile(str(split_dir))
    return sorted(int(p.name) for p in split_dir.iterdir()
                  if p.is_dir() and p.name.isdigit())


# --- symmetries ------------------------------------------------------------------------


@dataclass(frozen=True)
class ContinuousSymmetry:
    axis: np.ndarray     # (3,) unit
    offset: np.ndarray   # (3,) mm
    steps: int = 64


@dataclass(frozen=True)
class SymmetrySet:
    """Object-frame transforms under which the object looks identical."""

    discrete: tuple[Pose, ...] = (Pose.identity(),)
    continuous: tuple[ContinuousSymmetry, ...] = ()

    def __post_init__(self):
        if not any(np.allclose(p.rotation, np.eye(3)) and np.allclose(p.translation, 0)
                   for p in self.discrete):
            object.__setattr__(self, "discrete", (Pose.identity(),) + tuple(self.discrete))

    @classmethod
    def none(cls) -> "SymmetrySet":
        return cls()

    def expand(self) -> list[Pose]:
        """All discrete symmetries composed with sampled continuous rotations."""
        poses = list(self.discrete)
        for sym in self.continuous:
            sampled = []
            for k in range(max(1, sym.steps)):
                angle = 2.0 * np.pi * k / max(1, sym.steps)
                r = rotation_about_axis(sym.axis, angle)
                t = sym.offset - r @ sym.offset
                rot_pose = Pose(r, t)
                sampled.extend(p.compose(rot_pose) for p in poses)
            poses = sampled
        return poses


@dataclass(frozen=True)
class ObjectModelInfo:
    diameter: float
    symmetry: SymmetrySet


def load_models_info(path) -> dict[int, ObjectModelInfo]:
    """Parse a BOP models_info.json: diameters plus symmetry declarations."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    raw = json.loads(path.read_text())
    out = {}
    for key, entry in raw.items():
        ctx = f"models_info object {key}"
        discrete = [Pose.identity()]
        for mat in entry.get("symmetries_discrete", []):
            m = np.array(mat, dtype=np.float64).reshape(4, 4)
            discrete.append(Pose(_orthonormalized(m[:3, :3], ctx), m[:3, 3]))
        continuous = tuple(
            ContinuousSymmetry(
                axis=np.array(c["axis"], dtype=np.float64),
                offset=np.array(c.get("offset", [0.0, 0.0, 0.0]), dtype=np.float64))
            for c in entry.get("symmetries_continuous", []))
        out[int(key)] = ObjectModelInfo(
            diameter=float(_require(entry, "diameter", ctx)),
            symmetry=SymmetrySet(tuple(discrete), continuous))
    return out


# --- metrics ------------------------------------------------------------------------


@dataclass(frozen=True)
class ErrorReport:
    """Pose errors of one estimate against one ground-truth instance."""

    mssd_mm: float
    mspd_px: float
    add_mm: float
    adi_mm: float
    diameter_mm: float
    image_width: int
    mssd_passes: tuple[bool, ...] = field(default=())
    mspd_passes: tuple[bool, ...] = field(default=())

    @classmethod
    def missing(cls, diameter_mm: float, image_width: int) -> "ErrorReport":
        """BOP convention: an absent estimate fails every threshold."""
        return _finalize_report(np.inf, np.inf, np.inf, np.inf, diameter_mm, image_width)

    @property
    def recall_mssd(self) -> float:
        return float(np.mean(self.mssd_passes))

    @property
    def recall_mspd(self) -> float:
        return float(np.mean(self.mspd_passes))


def _finalize_report(mssd, mspd, add, adi, diameter, width) -> ErrorReport:
    r = width / 640.0
    return ErrorReport(
        mssd_mm=float(mssd), mspd_px=float(mspd), add_mm=float(add), adi_mm=float(adi),
        diameter_mm=float(diameter), image_width=int(width),
        mssd_passes=tuple(bool(mssd < th * diameter) for th in MSSD_THRESHOLDS),
        mspd_passes=tuple(bool(mspd < th * r) for th in MSPD_THRESHOLDS),
    )


def metric_vertices(mesh: TriMesh, limit: int = METRIC_MAX_VERTICES) -> np.ndarray:
    """Deterministic stride subsample used by all metrics on huge meshes."""
    verts = mesh.vertices
    if len(verts) <= limit:
        return verts
    stride = int(np.ceil(len(verts) / limit))
    return verts[::stride]


def _project(pts_cam: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    z = np.where(pts_cam[:, 2] > 1e-9, pts_cam[:, 2], np.nan)
    return np.stack([K.fx * pts_cam[:, 0] / z + K.cx,
                     K.fy * pts_cam[:, 1] / z + K.cy], axis=1)


def pose_error_metrics(est: Pose, gt: Pose, mesh: TriMesh, sym: SymmetrySet,
                       K: CameraIntrinsics, diameter_mm: float | None = None) -> ErrorReport:
    """MSSD, MSPD, ADD and ADI of an estimated pose.

    MSSD/MSPD take the minimum over the symmetry set applied to the estimate
    in the object frame; ADD/ADI ignore symmetries. Continuous symmetries
    are sampled at their declared step count (64 by default).
    """
    pts = metric_vertices(mesh)
    diameter = float(mesh.diameter if diameter_mm is None else diameter_mm)
    gt_cam = gt.apply(pts)
    gt_px = _project(gt_cam, K)

    mssd = np.inf
    mspd = np.inf
    for s in sym.expand():
        est_cam = est.compose(s).apply(pts)
        mssd = min(mssd, float(np.linalg.norm(est_cam - gt_cam, axis=1).max()))
        est_px = _project(est_cam, K)
        d = np.linalg.norm(est_px - gt_px, axis=1)
        mspd = min(mspd, np.inf if np.isnan(d).any() else float(d.max()))

    est_cam = est.apply(pts)
    add = float(np.linalg.norm(est_cam - gt_cam, axis=1).mean())
    from scipy.spatial import cKDTree
    adi = float(cKDTree(gt_cam).query(est_cam)[0].mean())
    return _finalize_report(mssd, mspd, add, adi, diameter, K.width)


@dataclass(frozen=True)
class ArSummary:
    ar: float
    ar_mssd: float
    ar_mspd: float
    n_instances: int
    label: str = AR_LABEL


def average_recall(reports: list[ErrorReport]) -> ArSummary:
    """Mean pass fraction over instances and threshold ladders.

    AR_MSSD averages mssd < theta over theta in 0.05d .. 0.5d (step 0.05d),
    AR_MSPD over 5r .. 50r px with r = image_width / 640; the reported AR is
    their mean and deliberately excludes VSD (no depth images here).
    """
    if not reports:
        raise EmptyReportSet("cannot aggregate zero error reports")
    ar_mssd = float(np.mean([r.recall_mssd for r in reports]))
    ar_mspd = float(np.mean([r.recall_mspd for r in reports]))
    return ArSummary(ar=(ar_mssd + ar_mspd) / 2.0, ar_mssd=ar_mssd,
                     ar_mspd=ar_mspd, n_instances=len(reports))


# --- results csv ------------------------------------------------------------------------


@dataclass(frozen=True)
class ResultRecord:
    scene_id: int
    im_id: int
    obj_id: int
    score: float
    pose: Pose
    time_s: float = -1.0  # BOP's "not reported"; keeps reruns byte-identical


def _fmt(v: float) -> str:
    f = float(v)
    if f == int(f) and abs(f) < 1e16:
        return str(int(f))
    return repr(f)


def write_results_csv(records: list[ResultRecord], path) -> None:
    """BOP submission CSV, rows ordered by (scene, image, object)."""
    ordered = sorted(records, key=lambda r: (r.scene_id, r.im_id, r.obj_id))
    try:
        with open(path, "w", newline="") as fh:
            fh.write("scene_id,im_id,obj_id,score,R,t,time\n")
            for r in ordered:
                rot = " ".join(_fmt(v) for v in r.pose.rotation.reshape(-1))
                tr = " ".join(_fmt(v) for v in r.pose.translation)
                fh.write(f"{r.scene_id},{r.im_id},{r.obj_id},{_fmt(r.score)},"
                         f"{rot},{tr},{_fmt(r.time_s)}\n")
    except OSError as e:
        raise IoError(f"cannot write results csv {path}: {e}") from e


def read_results_csv(path) -> list[ResultRecord]:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rot = np.array([float(v) for v in row["R"].split()]).reshape(3, 3)
            t = np.array([float(v) for v in row["t"].split()])
            records.append(ResultRecord(
                scene_id=int(row["scene_id"]), im_id=int(row["im_id"]),
                obj_id=int(row["obj_id"]), score=float(row["score"]),
                pose=Pose(rot, t), time_s=float(row["time"])))
    return records
