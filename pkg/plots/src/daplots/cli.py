"""plots <kind> --in <csv...> --out <file> [--log-y] [--side N] [--label ...]"""

from __future__ import annotations

import argparse
import sys

from .render import KINDS, FigureSpec, render


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="plots", description="Render danet experiment CSVs as SVG figures."
    )
    parser.add_argument("kind", choices=KINDS)
    parser.add_argument("--in", dest="inputs", nargs="+", required=True,
                        help="input CSV file(s); delays overlays one per input")
    parser.add_argument("--out", required=True, help="output SVG path")
    parser.add_argument("--log-y", action="store_true")
    parser.add_argument("--side", type=int, help="grid side for netmap layout")
    parser.add_argument("--label", action="append", dest="labels",
                        help="legend label per input, in order")
    args = parser.parse_args(argv)
    result = render(
        FigureSpec(
            kind=args.kind,
            inputs=args.inputs,
            output=args.out,
            log_y=args.log_y,
            grid_side=args.side,
            labels=args.labels,
        )
    )
    print(f"wrote {result.path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
