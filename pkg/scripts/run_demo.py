#!/usr/bin/env python3
"""End-to-end demo: synthesize records, train a small model, evaluate, predict.

Runs the whole pipeline through the CLI in a few minutes on a laptop CPU.
Outputs land under --out (default out/demo).
"""

import argparse
import sys

from fullsleepnet import cli


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="out/demo")
    parser.add_argument("--count", type=int, default=12, help="synthetic records to generate")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--variant", default="CRA", choices=["C", "CR", "CA", "CRA"])
    parser.add_argument("--max-steps", type=int, default=150)
    args = parser.parse_args()

    records = f"{args.out}/records"
    run_dir = f"{args.out}/run"
    config_path = f"{args.out}/demo.ini"

    import os
    os.makedirs(args.out, exist_ok=True)
    with open(config_path, "w", encoding="utf-8") as fh:
        fh.write(
            "[model]\npreset = toy\n\n"
            "[training]\nlr = 2e-3\npatience = 5\nmax_epochs = 40\n"
            f"max_steps = {args.max_steps}\n\n"
            "[synth]\nnum_epochs = 5\n"
        )

    steps = [
        ["synth", "--config", config_path, "--count", str(args.count),
         "--out", records, "--seed", str(args.seed)],
        ["train", "--config", config_path, "--records", f"{records}/*.fsn1",
         "--out", run_dir, "--seed", str(args.seed), "--variant", args.variant,
         "--precision", "32"],
        ["evaluate", "--checkpoint", f"{run_dir}/checkpoint.fsnw",
         "--records", f"{records}/*.fsn1", "--out", f"{args.out}/eval",
         "--precision", "32"],
        ["predict", "--checkpoint", f"{run_dir}/checkpoint.fsnw",
         "--records", f"{records}/record_0000.fsn1", "--out", f"{args.out}/pred",
         "--precision", "32"],
    ]
    for argv in steps:
        print(f"\n$ fullsleepnet {' '.join(argv)}")
        code = cli.main(argv)
        if code != 0:
            return code
    print(f"\ndemo complete; see {args.out}/")
    return 0


if __name__ == "__main__":
    sys.exit(main())
