"""Empirical convergence orders for every Adams scheme on the full benchmark suite.

    python scripts/run_order_study.py --out results/orders.csv
"""

import argparse
import math
from collections import defaultdict

from fuseode import orderlab


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="orders.csv")
    ap.add_argument("--resolutions", default="16,32,64,128,256")
    args = ap.parse_args()

    res = [int(v) for v in args.resolutions.split(",")]
    rows = orderlab.run_order_study(resolutions=res)
    orderlab.write_order_csv(rows, args.out)

    # finest-resolution slope per (problem, scheme)
    table = defaultdict(dict)
    for problem, row in rows:
        if row.steps == res[-1]:
            table[problem][row.scheme] = row.empirical_order
    schemes = [label for label, _, _ in orderlab.standard_schemes()]
    print(f"{'problem':<12}" + "".join(f"{s:>8}" for s in schemes))
    for problem, slopes in table.items():
        cells = ("exact" if math.isinf(v) else "-" if math.isnan(v) else f"{v:.3f}"
                 for v in (slopes[s] for s in schemes))
        print(f"{problem:<12}" + "".join(f"{c:>8}" for c in cells))
    print(f"wrote {len(rows)} rows to {args.out}")


if __name__ == "__main__":
    main()
