"""Forward recursion vs filter+smoother: wall clock and storage over a size sweep.

    python scripts/run_benchmark.py --sizes 1000 10000 100000 --K 2 3 --csv runs/bench.csv
"""

import argparse
import sys

from rsscore.bench import BenchCase, run_sweep, write_csv


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", type=int, nargs="+", default=[1_000, 10_000, 100_000])
    parser.add_argument("--K", type=int, nargs="+", default=[2, 3])
    parser.add_argument("--ar-lags", type=int, default=0)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--warmup", type=int, default=1)
    parser.add_argument("--no-memory", action="store_true", help="skip tracemalloc peak measurements")
    parser.add_argument("--csv", default="runs/bench.csv")
    args = parser.parse_args(argv)

    cases = [BenchCase(n=n, K=K, ar_lags=args.ar_lags) for K in args.K for n in args.sizes]
    print(f"{'n':>7} {'K':>2} {'d':>3} {'fwd s':>8} {'base s':>8} {'state B':>8} {'base B':>10} {'fwd peak':>9} {'base peak':>10}")

    def log(r):
        print(
            f"{r.n:>7} {r.K:>2} {r.d:>3} {r.forward_seconds:>8.4f} {r.baseline_seconds:>8.4f} "
            f"{r.forward_state_bytes:>8} {r.baseline_bytes:>10} {r.forward_peak_bytes:>9} {r.baseline_peak_bytes:>10}"
        )

    records = run_sweep(cases, args.repeats, args.warmup, not args.no_memory, log=log)
    write_csv(records, args.csv)
    print(f"wrote {args.csv}")
    return 0 if all(r.equivalent for r in records) else 1


if __name__ == "__main__":
    sys.exit(main())
