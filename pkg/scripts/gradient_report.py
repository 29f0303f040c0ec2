"""Print the finite-difference gradient report for every op and the full objective."""

import argparse
import sys
import time

from icd.gradsuite import run_suite


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--trials", type=int, default=1, help="random instances per op")
    args = ap.parse_args()
    t0 = time.perf_counter()
    reports = run_suite(seed=args.seed, trials=args.trials)
    for r in reports:
        print(r.line())
    failed = [r.op_name for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} passed in {time.perf_counter() - t0:.1f}s")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
