"""Command-line surface: template building, batch estimation, evaluation,
ablations and the synthetic self-test.

Exit codes: 0 success, 1 failed self-test, 2 configuration error, 3 I/O
error (missing or unwritable files).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .errors import (ConfigError, IoError, MissingFile, ParseError,
                     UnsupportedFormat, ZeroposeError)
from .mesh import load_mesh
from .pipeline import DEFAULT_TEMPLATE_CAMERA, PipelineConfig, load_config
from .render import sample_viewpoints
from .template_store import build_template_store, manifest_digest


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file mirroring PipelineConfig")
    parser.add_argument("--seed", type=int, help="master RNG seed")
    parser.add_argument("--backend", choices=("archive", "oracle"),
                        help="descriptor source")
    parser.add_argument("--store", help="template store directory")
    parser.add_argument("--dataset", help="BOP-layout dataset root")
    parser.add_argument("--masks", help="detections JSON; default: gt mask_visib")
    parser.add_argument("--out", help="output path (results csv / report)")
    parser.add_argument("--descriptor-dir", help="query descriptor archives (archive backend)")
    parser.add_argument("--split", help="dataset split directory name (default test)")


def _config_from(args) -> PipelineConfig:
    overrides = {
        "seed": args.seed,
        "descriptor_backend": args.backend,
        "store": args.store,
        "dataset": args.dataset,
        "masks": args.masks,
        "out": args.out,
        "descriptor_dir": args.descriptor_dir,
        "split": args.split,
    }
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zeropose",
        description="Zero-shot template-based 6D object pose estimation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render-templates", help="render a template store for one object")
    _add_common(p)
    p.add_argument("--model", help="object mesh (PLY); default models/obj_<id>.ply "
                                   "under --dataset")
    p.add_argument("--obj", type=int, default=1, help="object id (default 1)")
    p.add_argument("--templates", type=int, help="number of views (default from config)")
    p.add_argument("--radius-scale", type=float,
                   help="camera distance as a multiple of the object diameter")

    p = sub.add_parser("estimate", help="estimate poses for every masked instance")
    _add_common(p)

    p = sub.add_parser("evaluate", help="score a results csv against ground truth")
    _add_common(p)

    p = sub.add_parser("ablate", help="sweep template or correspondence counts")
    _add_common(p)
    p.add_argument("--sweep", choices=("templates", "correspondences"), required=True)
    p.add_argument("--values", required=True,
                   help="comma-separated sweep values, e.g. 10,50,100,200,300")

    p = sub.add_parser("selftest", help="model-free synthetic end-to-end check")
    _add_common(p)
    p.add_argument("--queries", type=int, default=36, help="held-out query views")
    p.add_argument("--templates", type=int, default=300, help="template count")

    return parser


def _cmd_render_templates(args) -> int:
    config = _config_from(args)
    if args.model:
        mesh_path = Path(args.model)
    elif config.dataset:
        mesh_path = Path(config.dataset) / "models" / f"obj_{args.obj:06d}.ply"
    else:
        raise ConfigError("render-templates needs --model or --dataset")
    if not config.store:
        raise ConfigError("render-templates needs --store")
    if not mesh_path.exists():
        raise MissingFile(str(mesh_path))

    mesh = load_mesh(mesh_path)
    n = args.templates or config.template_count
    radius_scale = args.radius_scale or config.radius_scale
    views = sample_viewpoints(n, radius_mm=radius_scale * mesh.diameter)
    manifest = build_template_store(
        mesh, views, DEFAULT_TEMPLATE_CAMERA, config.store, object_id=args.obj,
        pad=config.crop_pad, out_size=config.out_size)
    usable = sum(1 for v in manifest["views"] if not v["flags"])
    print(f"wrote {len(manifest['views'])} templates ({usable} usable) "
          f"for obj {args.obj} to {config.store}")
    print(f"manifest digest {manifest_digest(manifest)}")
    return 0


def _cmd_estimate(args) -> int:
    summary = pipeline.cmd_estimate(_config_from(args))
    print(json.dumps(summary, sort_keys=True))
    return 0


def _cmd_evaluate(args) -> int:
    report = pipeline.cmd_evaluate(_config_from(args))
    print(json.dumps(report, sort_keys=True))
    return 0


def _cmd_ablate(args) -> int:
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"bad --values list: {e}") from e
    results = pipeline.cmd_ablate(_config_from(args), args.sweep, values)
    for value, ar in results:
        print(f"{value},{ar:.4f}")
    return 0


def _cmd_selftest(args) -> int:
    report = pipeline.cmd_selftest(
        seed=args.seed or 0, work_dir=args.out, n_templates=args.templates,
        n_queries=args.queries)
    print(json.dumps(report.to_dict(), sort_keys=True, indent=1))
    return 0 if report.passed else 1


_COMMANDS = {
    "render-templates": _cmd_render_templates,
    "estimate": _cmd_estimate,
    "evaluate": _cmd_evaluate,
    "ablate": _cmd_ablate,
    "selftest": _cmd_selftest,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (IoError, MissingFile, ParseError, UnsupportedFormat, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3
    except ZeroposeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
