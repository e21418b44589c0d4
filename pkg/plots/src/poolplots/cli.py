"""poolsim-plots: render figures from poolsim's written outputs."""

import argparse
import sys

from .figures import FIGURE_KINDS, PlotError, render


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="poolsim-plots",
        description="Render figures from poolsim run files.")
    sub = parser.add_subparsers(required=True)
    p = sub.add_parser("render", help="render one figure kind to a file")
    p.add_argument("--kind", required=True, choices=FIGURE_KINDS)
    p.add_argument("--in", dest="in_path", required=True,
                   help="sweep.csv, points CSV, or report JSON per kind")
    p.add_argument("--out", required=True, help="figure file (png/pdf/svg)")
    p.add_argument("--annotations", default=None,
                   help="regression report JSON (regression_scatter)")
    p.add_argument("--metric", default="pef_co2",
                   help="sweep metric for the curve kinds")
    p.add_argument("--pollutant", default="CO2")
    p.add_argument("--dpi", type=int, default=150)
    p.set_defaults(func=cmd_render)
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (PlotError, OSError, KeyError, ValueError) as exc:
        print(f"poolsim-plots: {exc}", file=sys.stderr)
        return 2


def cmd_render(args):
    meta = render(args.kind, args.in_path, args.out,
                  annotations=args.annotations, metric=args.metric,
                  pollutant=args.pollutant, dpi=args.dpi)
    print(f"wrote {meta['out']}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
