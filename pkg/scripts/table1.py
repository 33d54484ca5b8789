"""Recompute the harmonic-mean column of the published comparison table and the MTL deltas."""

import argparse

from burstkit import analysis
from burstkit.objectives import harmonic_mean_score


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", help="write the comparison report CSV here")
    args = ap.parse_args()

    print(f"{'model':<22}{'mtl':<5}{'recomputed':>11}{'printed':>9}{'diff':>8}")
    for model, mtl, ccc, u, mae, printed in analysis.TABLE1:
        hm = harmonic_mean_score(ccc, u, mae)
        print(f"{model:<22}{'yes' if mtl else 'no':<5}{hm:>11.3f}{printed:>9.3f}{hm - printed:>+8.3f}")

    rows = analysis.mtl_comparison_report(analysis.table1_results())
    if args.out:
        analysis.write_report_csv(args.out, rows)
        print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
