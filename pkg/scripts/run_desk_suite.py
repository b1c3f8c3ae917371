"""Train both generators and run every steganalysis condition at desk scale.

    python scripts/run_desk_suite.py --out-dir runs/desk
    python scripts/run_desk_suite.py --out-dir runs/desk --suite c1-c6   # reuse trained generators

Writes reports.jsonl, summary.md, runtimes.json and config.resolved.json
under the output directory and prints the summary table.
"""

import argparse
import sys
from pathlib import Path

from sgan.cli import main


def parse_args():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out-dir", default="runs/desk")
    p.add_argument("--suite", choices=("real", "c1-c6", "all"), default="all")
    p.add_argument("--config", help="harness config JSON (defaults otherwise)")
    return p.parse_args()


if __name__ == "__main__":
    args = parse_args()
    out = Path(args.out_dir)
    gens = out / "generators"
    argv = ["--log-level", "INFO", "experiment", "--suite", args.suite, "--out-dir", str(out)]
    if args.config:
        argv += ["--config", args.config]
    have = sorted(gens.glob("dcgan/checkpoint_epoch*.ckpt")), sorted(gens.glob("sgan/checkpoint_epoch*.ckpt"))
    if all(have):
        argv += ["--dcgan", str(have[0][-1]), "--sgan", str(have[1][-1])]
    else:
        argv.append("--train-first")
    sys.exit(main(argv))
