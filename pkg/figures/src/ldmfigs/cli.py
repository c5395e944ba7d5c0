"""`ldmfigs render <figure-kind> --in DIR --out FILE`"""

from __future__ import annotations

import argparse
import sys

from .io import FigureError
from .render import render_level_sets, render_phase_portrait, render_sweep

RENDERERS = {"level-sets": render_level_sets,
             "phase-portrait": render_phase_portrait,
             "sweep": render_sweep}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ldmfigs", description="Render figures from pipeline exports.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("render")
    p.add_argument("figure_kind", choices=sorted(RENDERERS))
    p.add_argument("--in", dest="in_dir", required=True,
                   help="directory holding the CSV/JSON exports")
    p.add_argument("--out", dest="out_file", required=True,
                   help="output image path (png/svg by extension)")
    p.add_argument("--thresholds", type=float, nargs="*", default=None,
                   help="contour levels for level-set style figures")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    renderer = RENDERERS[args.figure_kind]
    kwargs = {}
    if args.figure_kind != "sweep" and args.thresholds:
        kwargs["thresholds"] = list(args.thresholds)
    try:
        renderer(args.in_dir, args.out_file, **kwargs)
    except FigureError as exc:
        print(f"figure error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
