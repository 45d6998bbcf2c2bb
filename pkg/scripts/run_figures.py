#!/usr/bin/env python3
"""Run the three figure experiments end to end (about 10 minutes on a laptop).

Usage: python scripts/run_figures.py [fig3|fig4|fig5 ...]
Writes curve CSVs under out/fig{3,4,5}; render images afterwards with the
curveplot package (plots/ directory).
"""

import sys
from pathlib import Path

from privsgd.cli import report, run_experiment

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def main() -> int:
    wanted = sys.argv[1:] or ["fig3", "fig4", "fig5"]
    for name in wanted:
        cfg = CONFIGS / f"{name}.cfg"
        if not cfg.exists():
            print(f"no config named {name}", file=sys.stderr)
            return 2
        print(f"=== {name} ===")
        code = run_experiment(str(cfg))
        if code != 0:
            return code
        report(f"out/{name}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
