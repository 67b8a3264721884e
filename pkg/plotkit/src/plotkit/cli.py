"""plotkit <kind> --in DIR --out FILE.png"""

from __future__ import annotations

import argparse
import sys

from .figures import KINDS, PlotSpec, render


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="plotkit",
        description="Render reservoir-management figures from run CSV/JSON files.")
    parser.add_argument("kind", choices=sorted(KINDS))
    parser.add_argument("--in", dest="in_dir", required=True,
                        help="input directory (run dir or eval output dir)")
    parser.add_argument("--out", required=True, help="output image path")
    parser.add_argument("--cycle", type=int, default=1,
                        help="cycle number for constraint-trace")
    parser.add_argument("--sim", default="rates_sim_median.csv",
                        help="simulator rates CSV name for the rates kind")
    parser.add_argument("--proxy", default="rates_proxy_median.csv",
                        help="proxy rates CSV name for the rates kind")
    args = parser.parse_args(argv)
    spec = PlotSpec(args.kind, args.in_dir, args.out,
                    options={"cycle": args.cycle, "sim": args.sim,
                             "proxy": args.proxy})
    try:
        path = render(spec)
    except (FileNotFoundError, KeyError, ValueError) as exc:
        print(f"plotkit: {exc}", file=sys.stderr)
        return 1
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
