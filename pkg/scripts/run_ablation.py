#!/usr/bin/env python3
"""Train and evaluate the six block-flag combinations on shared synthetic data
and print the resulting Dice table.

Usage: python scripts/run_ablation.py --workdir runs/ablation [--iterations 300]
"""

import argparse
import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))

from fednet.config import TrainConfig
from fednet.harness import ablate
from fednet.synth import synth_generate
from fednet.volume import write_mvol


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", required=True)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--count", type=int, default=4)
    parser.add_argument("--dims", default="64,64,48")
    parser.add_argument("--iterations", type=int, default=300)
    args = parser.parse_args()

    work = pathlib.Path(args.workdir)
    data = work / "data"
    data.mkdir(parents=True, exist_ok=True)
    dims = tuple(int(v) for v in args.dims.split(","))
    for idx, (ct, seg) in enumerate(synth_generate(args.seed + 1000, args.count, dims)):
        write_mvol(ct, data / f"case{idx:03d}_ct.mvol")
        write_mvol(seg, data / f"case{idx:03d}_seg.mvol")

    cfg = TrainConfig(data_dir=str(data), seed=args.seed, iterations=args.iterations,
                      checkpoint_out=str(work / "unused.fedckpt"))
    _, table = ablate(cfg)
    print(table)
    return 0


if __name__ == "__main__":
    sys.exit(main())
