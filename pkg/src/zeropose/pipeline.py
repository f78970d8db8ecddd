"""End-to-end estimation over BOP-layout datasets, ablations and self-test.

Per masked instance the pipeline runs crop -> descriptors -> global template
retrieval -> mutual nearest neighbors -> 2D-3D lifting -> RANSAC PnP. Any
stage failure yields a per-instance diagnostic record and the instance is
skipped, matching BOP's missing-estimate scoring; only configuration errors
abort a run. Everything downstream of the inputs is a deterministic
function of (files, config, seed).
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import bop_eval, matching, synthetic
from .bop_eval import (ArSummary, ResultRecord, SceneAnnotation, average_recall,
                       list_scene_ids, load_bop_scene, load_models_info,
                       pose_error_metrics, read_results_csv, write_results_csv)
from .descriptors import (DescriptorGrid, GlobalDescriptor, crop_and_resize,
                          oracle_descriptors, pool_global, read_tensor)
from .errors import (ConfigError, EmptyAfterFiltering, IoError, MissingFile,
                     NoConsensus, NoForeground, TooFewCorrespondences,
                     ZeroposeError)
from .geometry import CameraIntrinsics, rotation_angle_between
from .mesh import dequantize_nocs, load_mesh
from .pose_solver import RansacParams, ransac_pnp
from .render import min_angular_spacing_rad, sample_viewpoints
from .template_store import TemplateStore, build_template_store

BACKENDS = ("archive", "oracle")
DEFAULT_TEMPLATE_CAMERA = CameraIntrinsics(550.0, 550.0, 320.0, 240.0, 640, 480)


@dataclass(frozen=True)
class PipelineConfig:
    template_count: int = 300
    correspondence_top_k: int = 20
    crop_pad: float = 1.2
    out_size: int = 224
    patch_size: int = 8
    stride: int = 8
    ransac: RansacParams = field(default_factory=RansacParams)
    descriptor_backend: str = "oracle"
    oracle_dim: int = 32
    seed: int = 0
    split: str = "test"
    radius_scale: float = 2.5
    store: str | None = None
    dataset: str | None = None
    masks: str | None = None
    out: str | None = None
    descriptor_dir: str | None = None

    def __post_init__(self):
        if self.template_count < 1:
            raise ConfigError("template_count must be >= 1")
        if self.correspondence_top_k < 4:
            raise ConfigError("correspondence_top_k must be >= 4 (PnP minimum)")
        if self.descriptor_backend not in BACKENDS:
            raise ConfigError(f"descriptor_backend must be one of {BACKENDS}")
        if self.out_size < 32:
            raise ConfigError("out_size must be >= 32")
        if self.crop_pad < 1.0:
            raise ConfigError("crop_pad must be >= 1.0")


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Config file (JSON mirroring the field names) + CLI overrides."""
    values: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            values = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from e
        if not isinstance(values, dict):
            raise ConfigError("config file must contain a JSON object")
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    ransac_cfg = values.pop("ransac", {})
    known = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        ransac = RansacParams(**ransac_cfg) if isinstance(ransac_cfg, dict) else ransac_cfg
        return PipelineConfig(ransac=ransac, **values)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


@dataclass(frozen=True)
class Diagnostic:
    scene_id: int
    im_id: int
    instance: int
    obj_id: int
    stage: str
    detail: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _instance_seed(master: int, scene_id: int, im_id: int, instance: int) -> int:
    seq = np.random.SeedSequence([master, scene_id, im_id, instance])
    return int(seq.generate_state(1)[0])


def bbox_from_mask(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return (int(xs.min()), int(ys.min()),
            int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))


# --- descriptor backends -----------------------------------------------------------


class OracleDescriptorBackend:
    """Synthetic descriptors computed from stored coordinate maps.

    The query side reads the full-frame coordinate map rendered alongside
    the synthetic dataset (query_coords/<im>_<inst>.coord.zst6); templates
    use their own stored maps. `corrupt` replaces every descriptor with
    seeded noise; it exists so the self-test can prove it would fail on
    meaningless features.
    """

    def __init__(self, config: PipelineConfig, corrupt: bool = False):
        self.config = config
        self.corrupt = corrupt

    def _maybe_corrupt(self, grid: DescriptorGrid, seed: int) -> DescriptorGrid:
        if not self.corrupt:
            return grid
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBAD]))
        noise = rng.normal(size=grid.data.shape)
        return DescriptorGrid.from_raw(noise, grid.valid, grid.patch_size,
                                       grid.stride, layer_tag="corrupted")

    def query_grid(self, scene_dir: Path, scene_id: int, im_id: int, instance: int,
                   mask: np.ndarray, bbox, cam: CameraIntrinsics):
        cfg = self.config
        coord_path = scene_dir / "query_coords" / f"{im_id:06d}_{instance:06d}.coord.zst6"
        if not coord_path.exists():
            raise MissingFile(str(coord_path))
        coords = dequantize_nocs(read_tensor(coord_path)[0])
        crop_coords, crop_mask, transform = crop_and_resize(
            coords, mask, bbox, cfg.crop_pad, cfg.out_size, mode="nearest")
        grid = oracle_descriptors(crop_coords, crop_mask, cfg.patch_size,
                                  cfg.stride, cfg.oracle_dim)
        grid = self._maybe_corrupt(grid, _instance_seed(cfg.seed, scene_id, im_id, instance))
        return grid, transform

    def template_grid(self, record) -> DescriptorGrid:
        coords, mask = record.load_coord_map()
        cfg = self.config
        grid = oracle_descriptors(coords, mask, cfg.patch_size, cfg.stride, cfg.oracle_dim)
        return self._maybe_corrupt(
            grid, _instance_seed(cfg.seed, 0xF00D, 0xF00D, record.index))


class ArchiveDescriptorBackend:
    """Descriptors read from tensor archives written by an external exporter.

    Query archives live in <descriptor_dir>/<scene>/<im>_<inst>.loc.zst6 and
    .glob.zst6 (crops must follow this pipeline's crop rule); template
    archives sit next to the template files as view_<k>.loc.zst6/.glob.zst6.
    """

    def __init__(self, config: PipelineConfig):
        if not config.descriptor_dir:
            raise ConfigError("archive backend requires descriptor_dir")
        self.config = config
        self.root = Path(config.descriptor_dir)

    def query_grid(self, scene_dir: Path, scene_id: int, im_id: int, instance: int,
                   mask: np.ndarray, bbox, cam: CameraIntrinsics):
        cfg = self.config
        stem = self.root / f"{scene_id:06d}" / f"{im_id:06d}_{instance:06d}"
        loc = stem.with_name(stem.name + ".loc.zst6")
        if not loc.exists():
            raise MissingFile(str(loc))
        grid = DescriptorGrid.load(loc)
        # recompute the deterministic crop transform from the mask bbox
        _, _, transform = crop_and_resize(mask.astype(np.float64), mask, bbox,
                                          cfg.crop_pad, cfg.out_size, mode="nearest")
        return grid, transform

    def query_global(self, scene_id: int, im_id: int, instance: int,
                     grid: DescriptorGrid) -> GlobalDescriptor:
        stem = self.root / f"{scene_id:06d}" / f"{im_id:06d}_{instance:06d}.glob.zst6"
        if stem.exists():
            return GlobalDescriptor.load(stem)
        return pool_global(grid)

    def template_grid(self, record) -> DescriptorGrid:
        loc = record.path("loc.zst6")
        if not loc.exists():
            raise MissingFile(str(loc))
        return DescriptorGrid.load(loc)

    def template_global(self, record, grid: DescriptorGrid) -> GlobalDescriptor:
        pth = record.path("glob.zst6")
        if pth.exists():
            return GlobalDescriptor.load(pth)
        return pool_global(grid)


def make_backend(config: PipelineConfig, corrupt_descriptors: bool = False):
    if config.descriptor_backend == "oracle":
        return OracleDescriptorBackend(config, corrupt=corrupt_descriptors)
    return ArchiveDescriptorBackend(config)


class TemplateCache:
    """Per-object template descriptors, computed once per run."""

    def __init__(self, config: PipelineConfig, backend):
        if not config.store:
            raise ConfigError("estimation requires a template store path")
        self.config = config
        self.backend = backend
        self._stores: dict[int, TemplateStore] = {}
        self._entries: dict[int, list] = {}

    def store(self, obj_id: int) -> TemplateStore:
        if obj_id not in self._stores:
            self._stores[obj_id] = TemplateStore.open(self.config.store, obj_id)
        return self._stores[obj_id]

    def entries(self, obj_id: int) -> list:
        """[(record, grid, global)] for every usable template of the object."""
        if obj_id not in self._entries:
            entries = []
            for record in self.store(obj_id).usable_records():
                grid = self.backend.template_grid(record)
                if hasattr(self.backend, "template_global"):
                    glob = self.backend.template_global(record, grid)
                else:
                    glob = pool_global(grid)
                entries.append((record, grid, glob))
            self._entries[obj_id] = entries
        return self._entries[obj_id]

    def subset(self, obj_id: int, limit: int) -> list:
        recs = {r.index for r in self.store(obj_id).usable_records(limit)}
        return [e for e in self._entries_or_build(obj_id) if e[0].index in recs]

    def _entries_or_build(self, obj_id: int):
        return self.entries(obj_id)


# --- instance pipeline --------------------------------------------------------------


def _load_detections(path) -> dict[tuple[int, int], list[dict]]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"detections file not found: {p}")
    data = json.loads(p.read_text())
    grouped: dict[tuple[int, int], list[dict]] = {}
    for det in data:
        grouped.setdefault((int(det["scene_id"]), int(det["im_id"])), []).append(det)
    return grouped


def _estimate_instance(config, backend, cache, scene_dir, ann: SceneAnnotation,
                       instance: int, obj_id: int, mask_path, bbox_hint, score: float):
    scene_id, im_id = ann.scene_id, ann.image_id

    def fail(stage, detail=""):
        return None, Diagnostic(scene_id, im_id, instance, obj_id, stage, detail)

    if mask_path is None or not Path(mask_path).exists():
        return fail("segmentation-missing", str(mask_path))
    mask = np.asarray(Image.open(mask_path)) > 0
    bbox = bbox_hint or bbox_from_mask(mask)
    if bbox is None:
        return fail("segmentation-empty")

    try:
        query_grid, transform = backend.query_grid(
            scene_dir, scene_id, im_id, instance, mask, bbox, ann.camera)
    except (MissingFile, IoError) as e:
        return fail("descriptor-missing", str(e))
    except (NoForeground, ZeroposeError) as e:
        return fail("descriptor-empty", str(e))

    try:
        if hasattr(backend, "query_global"):
            query_global = backend.query_global(scene_id, im_id, instance, query_grid)
        else:
            query_global = pool_global(query_grid)
    except NoForeground as e:
        return fail("descriptor-empty", str(e))

    try:
        entries = cache.subset(obj_id, config.template_count)
    except (IoError, MissingFile) as e:
        return fail("store-missing", str(e))
    if not entries:
        return fail("store-empty")

    ranking = matching.match_template(query_global, [e[2] for e in entries])
    record, template_grid, _ = entries[ranking[0].template_index]

    try:
        pairs = matching.mutual_nearest_neighbors(query_grid, template_grid)
    except NoForeground as e:
        return fail("matching-empty", str(e))
    try:
        corr = matching.lift_correspondences(
            pairs, query_grid, template_grid, record, transform,
            top_k=config.correspondence_top_k)
    except EmptyAfterFiltering as e:
        return fail("lift-empty", str(e))

    params = replace(config.ransac,
                     seed=_instance_seed(config.seed, scene_id, im_id, instance))
    try:
        estimate = ransac_pnp(corr, ann.camera, params)
    except (TooFewCorrespondences, NoConsensus) as e:
        return fail("ransac-no-consensus", str(e))

    record_out = ResultRecord(scene_id=scene_id, im_id=im_id, obj_id=obj_id,
                              score=score, pose=estimate.pose)
    return record_out, None


def estimate_dataset(config: PipelineConfig, corrupt_descriptors: bool = False,
                     annotations: list[SceneAnnotation] | None = None,
                     cache: TemplateCache | None = None):
    """Run the full pipeline over a dataset split.

    Returns (records, diagnostics). Estimation never mutates the template
    store or the dataset; per-instance failures become diagnostics.
    """
    if not config.dataset:
        raise ConfigError("estimation requires a dataset path")
    split_dir = Path(config.dataset) / config.split
    backend = make_backend(config, corrupt_descriptors)
    cache = cache or TemplateCache(config, backend)

    if annotations is None:
        annotations = []
        for scene_id in list_scene_ids(split_dir):
            annotations.extend(load_bop_scene(split_dir, scene_id))

    detections = _load_detections(config.masks) if (
        config.masks and str(config.masks).endswith(".json")) else None

    records: list[ResultRecord] = []
    diagnostics: list[Diagnostic] = []
    for ann in annotations:
        scene_dir = split_dir / f"{ann.scene_id:06d}"
        if detections is not None:
            instances = [
                (i, int(d["obj_id"]), d.get("mask_png_path"), d.get("bbox"),
                 float(d.get("score", 1.0)))
                for i, d in enumerate(detections.get((ann.scene_id, ann.image_id), []))]
        else:
            instances = [(i, inst.obj_id, inst.mask_path, None, 1.0)
                         for i, inst in enumerate(ann.gt)]
        for instance, obj_id, mask_path, bbox_hint, score in instances:
            rec, diag = _estimate_instance(config, backend, cache, scene_dir, ann,
                                           instance, obj_id, mask_path, bbox_hint, score)
            if rec is not None:
                records.append(rec)
            else:
                diagnostics.append(diag)
    records.sort(key=lambda r: (r.scene_id, r.im_id, r.obj_id))
    return records, diagnostics


def cmd_estimate(config: PipelineConfig, corrupt_descriptors: bool = False) -> dict:
    if not config.out:
        raise ConfigError("estimate requires an output csv path (--out)")
    records, diagnostics = estimate_dataset(config, corrupt_descriptors)
    write_results_csv(records, config.out)
    diag_path = Path(str(config.out) + ".diag.jsonl")
    try:
        with open(diag_path, "w") as fh:
            for d in diagnostics:
                fh.write(json.dumps(d.to_dict(), sort_keys=True) + "\n")
    except OSError as e:
        raise IoError(f"cannot write diagnostics: {e}") from e
    return {"estimates": len(records), "failures": len(diagnostics),
            "results": str(config.out), "diagnostics": str(diag_path)}


# --- evaluation --------------------------------------------------------------------


def evaluate_records(records, annotations, models_info, meshes) -> ArSummary:
    """Match estimates to ground-truth instances and aggregate recall.

    Estimates are consumed in order per (scene, image, object); ground-truth
    instances without a matching estimate count as failing every threshold.
    """
    queues: dict[tuple[int, int, int], list[ResultRecord]] = {}
    for r in sorted(records, key=lambda r: (r.scene_id, r.im_id, r.obj_id, -r.score)):
        queues.setdefault((r.scene_id, r.im_id, r.obj_id), []).append(r)

    reports = []
    for ann in annotations:
        for inst in ann.gt:
            info = models_info[inst.obj_id]
            queue = queues.get((ann.scene_id, ann.image_id, inst.obj_id), [])
            if queue:
                est = queue.pop(0)
                reports.append(pose_error_metrics(
                    est.pose, inst.pose, meshes[inst.obj_id], info.symmetry,
                    ann.camera, diameter_mm=info.diameter))
            else:
                reports.append(bop_eval.ErrorReport.missing(info.diameter,
                                                            ann.camera.width))
    return average_recall(reports)


def _load_eval_assets(config: PipelineConfig):
    root = Path(config.dataset)
    models_dir = root / "models"
    models_info = load_models_info(models_dir / "models_info.json")
    annotations = []
    for scene_id in list_scene_ids(root / config.split):
        annotations.extend(load_bop_scene(root / config.split, scene_id))
    needed = {inst.obj_id for ann in annotations for inst in ann.gt}
    meshes = {}
    for obj_id in sorted(needed):
        mesh_path = models_dir / f"obj_{obj_id:06d}.ply"
        if not mesh_path.exists():
            raise MissingFile(str(mesh_path))
        meshes[obj_id] = load_mesh(mesh_path)
    return annotations, models_info, meshes


def cmd_evaluate(config: PipelineConfig) -> dict:
    if not config.out:
        raise ConfigError("evaluate requires the results csv path (--out)")
    records = read_results_csv(config.out)
    annotations, models_info, meshes = _load_eval_assets(config)
    summary = evaluate_records(records, annotations, models_info, meshes)
    report = {"label": summary.label, "ar": summary.ar, "ar_mssd": summary.ar_mssd,
              "ar_mspd": summary.ar_mspd, "n_instances": summary.n_instances,
              "n_estimates": len(records)}
    report_path = Path(str(config.out) + ".eval.json")
    report_path.write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    return report


# --- ablations ---------------------------------------------------------------------


def cmd_ablate(config: PipelineConfig, sweep: str, values: list[int]) -> list[tuple[int, float]]:
    """Re-run estimation varying one knob; returns [(value, AR)].

    The template sweep consumes manifest prefixes, which are farthest-point
    orderings by construction, so each prefix is itself a well-spread set.
    """
    if sweep not in ("templates", "correspondences"):
        raise ConfigError(f"unknown sweep '{sweep}'")
    if not values:
        raise ConfigError("sweep needs at least one value")
    annotations, models_info, meshes = _load_eval_assets(config)
    backend = make_backend(config)
    cache = TemplateCache(config, backend)
    results = []
    for value in values:
        if sweep == "templates":
            cfg = replace(config, template_count=int(value))
        else:
            cfg = replace(config, correspondence_top_k=int(value))
        records, _ = estimate_dataset(cfg, annotations=annotations, cache=cache)
        summary = evaluate_records(records, annotations, models_info, meshes)
        results.append((int(value), summary.ar))
    if config.out:
        try:
            with open(config.out, "w") as fh:
                fh.write(f"{sweep},ar\n")
                for value, ar in results:
                    fh.write(f"{value},{ar!r}\n")
        except OSError as e:
            raise IoError(f"cannot write ablation csv: {e}") from e
    return results


# --- self-test ---------------------------------------------------------------------


@dataclass(frozen=True)
class SelftestReport:
    passed: bool
    n_queries: int
    n_estimated: int
    median_rotation_deg: float
    median_translation_mm: float
    translation_limit_mm: float
    diameter_mm: float
    min_template_spacing_deg: float
    ar: float
    runtime_s: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def cmd_selftest(seed: int = 0, work_dir=None, n_templates: int = 300,
                 n_queries: int = 36, corrupt_descriptors: bool = False) -> SelftestReport:
    """Model-free end-to-end check on a procedural mesh.

    Builds a template store, renders held-out query views, runs the full
    oracle-backend pipeline and scores pose errors against the generating
    poses. Pass criteria: at least 30 estimates, median rotation error
    below 5 degrees and median translation error below 5% of the object
    diameter. `corrupt_descriptors` is the negative control.
    """
    from .procedural import make_blob

    t0 = time.perf_counter()
    if work_dir is None:
        import tempfile
        work_dir = tempfile.mkdtemp(prefix="zeropose-selftest-")
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    data_root = work_dir / "data"
    store_root = work_dir / "store"

    mesh_path = work_dir / "blob.ply"
    from .mesh import write_ply
    write_ply(make_blob(seed=seed), mesh_path, binary=True)
    mesh = load_mesh(mesh_path)  # same artifact the pipeline would consume

    views = sample_viewpoints(n_templates, radius_mm=2.5 * mesh.diameter)
    build_template_store(mesh, views, DEFAULT_TEMPLATE_CAMERA, store_root, object_id=1)

    query_poses = synthetic.sample_query_poses(n_queries, mesh.diameter, seed=seed)
    annotations = synthetic.write_synthetic_dataset(data_root, mesh, query_poses)

    config = PipelineConfig(
        template_count=n_templates, store=str(store_root), dataset=str(data_root),
        out=str(work_dir / "results.csv"), seed=seed, descriptor_backend="oracle")
    records, diagnostics = estimate_dataset(config, corrupt_descriptors)
    write_results_csv(records, config.out)

    gt_by_image = {(a.scene_id, a.image_id): a.gt[0].pose for a in annotations}
    rot_errs = []
    trans_errs = []
    for rec in records:
        gt_pose = gt_by_image[(rec.scene_id, rec.im_id)]
        rot_errs.append(np.degrees(rotation_angle_between(rec.pose, gt_pose)))
        trans_errs.append(float(np.linalg.norm(
            rec.pose.translation - gt_pose.translation)))

    models_info = load_models_info(Path(data_root) / "models" / "models_info.json")
    ar = evaluate_records(records, annotations, models_info, {1: mesh}).ar if records else 0.0

    median_rot = float(np.median(rot_errs)) if rot_errs else float("inf")
    median_trans = float(np.median(trans_errs)) if trans_errs else float("inf")
    trans_limit = 0.05 * mesh.diameter
    passed = (len(records) >= min(30, n_queries)
              and median_rot < 5.0 and median_trans < trans_limit)

    report = SelftestReport(
        passed=bool(passed), n_queries=n_queries, n_estimated=len(records),
        median_rotation_deg=median_rot, median_translation_mm=median_trans,
        translation_limit_mm=trans_limit, diameter_mm=mesh.diameter,
        min_template_spacing_deg=float(np.degrees(min_angular_spacing_rad(views))),
        ar=float(ar), runtime_s=time.perf_counter() - t0)
    (work_dir / "selftest_report.json").write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")
    return report
