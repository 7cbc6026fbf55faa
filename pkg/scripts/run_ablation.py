"""Strategy x weighting table on the default synthetic config (thin wrapper over `uma2 ablation`).

Usage: python3 scripts/run_ablation.py [--seeds 0,1,2] [--out ablation] [--quick]
"""

import sys

from uma2.cli import main

if __name__ == "__main__":
    args = sys.argv[1:]
    if not any(a.startswith("--seeds") for a in args):
        args += ["--seeds", "0,1,2"]
    sys.exit(main(["ablation", *args]))
