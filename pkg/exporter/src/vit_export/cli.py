"""vit-export command line: batch descriptor extraction to tensor archives."""

from __future__ import annotations

import argparse
import sys

from .errors import ExporterError, ModelLoadError, ShapeError
from .export import GLOBAL_LAYER, LOCAL_LAYER, ExportJob, export_descriptors
from .model import load_model


def build_parser():
    parser = argparse.ArgumentParser(
        prog="vit-export",
        description="Export ViT-S/8 key-token descriptors of masked crops")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="write descriptor archives for a crop list")
    p.add_argument("--images", nargs="+", required=True, help="224x224 crop PNGs")
    p.add_argument("--masks", nargs="+", required=True, help="matching mask PNGs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--layer", type=int, choices=(9, 11),
                   help="key layer for the selected outputs "
                        "(defaults: 9 for global, 11 for local)")
    p.add_argument("--global", dest="only_global", action="store_true",
                   help="write only global descriptors")
    p.add_argument("--local", dest="only_local", action="store_true",
                   help="write only local patch descriptors")
    p.add_argument("--binned", action="store_true",
                   help="17-bin spatial aggregation of local keys (dim 6528)")
    p.add_argument("--weights", help="path to a pretrained ViT-S/8 state dict")
    p.add_argument("--random-init", type=int, metavar="SEED",
                   help="seeded random weights (testing only; recorded in metadata)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        model = load_model(weights=args.weights, random_init_seed=args.random_init)
        checkpoint = args.weights if args.weights else f"random-init:{args.random_init}"
        write_global = args.only_global or not args.only_local
        write_local = args.only_local or not args.only_global
        global_layer = GLOBAL_LAYER
        local_layer = LOCAL_LAYER
        if args.layer is not None:
            if write_global:
                global_layer = args.layer
            if write_local:
                local_layer = args.layer
        job = ExportJob(
            images=args.images,
            masks=args.masks,
            out_dir=args.out,
            checkpoint=str(checkpoint),
            global_layer=global_layer,
            local_layer=local_layer,
            write_global=write_global,
            write_local=write_local,
            binned=args.binned,
        )
        written = export_descriptors(job, model)
    except ModelLoadError as e:
        print(f"model error: {e}", file=sys.stderr)
        return 2
    except ShapeError as e:
        print(f"input error: {e}", file=sys.stderr)
        return 2
    except ExporterError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3
    print(f"wrote {len(written)} descriptor files to {job.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
