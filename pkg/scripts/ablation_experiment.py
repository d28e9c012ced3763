#!/usr/bin/env python3
"""Run the 2-family source-selection ablation and print a summary.

Modes: LF (sources from the target's family), OtherLF (sources from the other
family), SINGLE (target-only training), and optionally ALL (every source).
"""

import argparse
import json
import sys

from metainflect.experiments import run_ablation_experiment


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", default="1,2,3,4,5")
    parser.add_argument("--data-seed", type=int, default=13)
    parser.add_argument("--model", default="pg", choices=("pg", "med"))
    parser.add_argument("--regime", default="maml+ft",
                        choices=("maml+ft", "multitask+ft"))
    parser.add_argument("--modes", default="LF,OtherLF,SINGLE",
                        help="comma-separated subset of ALL,LF,OtherLF,SINGLE")
    parser.add_argument("--cache-dir", default=None)
    parser.add_argument("--out", default=None)
    args = parser.parse_args(argv)

    seeds = tuple(int(s) for s in args.seeds.split(","))
    modes = tuple(m.strip() for m in args.modes.split(","))
    result = run_ablation_experiment(seeds=seeds, data_seed=args.data_seed,
                                     model_kind=args.model, regime=args.regime,
                                     modes=modes, cache_dir=args.cache_dir)
    print()
    print(result.summary())
    print(f"\ntotal time: {result.seconds:.0f}s")
    if "LF" in modes and "OtherLF" in modes:
        print(f"LF - OtherLF: {(result.mean('LF') - result.mean('OtherLF')) * 100:+.1f} points")
    if "OtherLF" in modes and "SINGLE" in modes:
        print(f"OtherLF - SINGLE: "
              f"{(result.mean('OtherLF') - result.mean('SINGLE')) * 100:+.1f} points")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump({"per_seed": result.per_seed, "seconds": result.seconds},
                      fh, indent=2, sort_keys=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
