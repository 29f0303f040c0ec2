"""Scale-set and gamma ablation tables at desk scale, via the CLI.

Trains (or reuses) a teacher, then writes ablate_scales.csv and
ablate_gamma.csv into --out.

    python scripts/ablation_tables.py --out runs/ablation
"""

import argparse
import sys
from pathlib import Path

from icd.cli import main as icd_main


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(Path(__file__).parent.parent / "configs" / "desk.cfg"))
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--teacher", help="existing teacher checkpoint dir")
    args = ap.parse_args()

    common = ["--config", args.config, "--out", args.out]
    teacher = args.teacher
    if teacher is None:
        code = icd_main(["train-teacher", *common])
        if code:
            return code
        teacher = str(Path(args.out) / "teacher")
    for cmd in ("ablate-scales", "ablate-gamma"):
        code = icd_main([cmd, "--teacher", teacher, *common])
        if code:
            return code
    for name in ("ablate_scales.csv", "ablate_gamma.csv"):
        print(f"== {name}")
        print((Path(args.out) / name).read_text())
    return 0


if __name__ == "__main__":
    sys.exit(main())
