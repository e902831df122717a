#!/usr/bin/env python3
"""Run the finite-difference gradient checks for every op and block.

Usage: python scripts/run_gradcheck.py [--tol 1e-4]
Exit code is nonzero if any check fails.
"""

import argparse
import pathlib
import sys
import time

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))

from fednet.harness import gradcheck_suite


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--tol", type=float, default=1e-4)
    args = parser.parse_args()

    started = time.perf_counter()
    results = gradcheck_suite(tol=args.tol)
    for check in results:
        state = "PASS" if check.passed else "FAIL"
        print(f"{check.name}\t{check.max_rel_err:.3e}\t{state}")
    failed = sum(not c.passed for c in results)
    print(f"checks\t{len(results)}")
    print(f"failed\t{failed}")
    print(f"seconds\t{time.perf_counter() - started:.1f}")
    return 0 if failed == 0 else 2


if __name__ == "__main__":
    sys.exit(main())
