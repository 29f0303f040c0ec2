"""Desk-scale comparison: one teacher, ce_only / kd / sdd / icd students over several seeds.

    python scripts/smoke_experiment.py --out runs/smoke --seeds 0 1 2
"""

import argparse
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from icd.config import load_config
from icd.data import load_dataset
from icd.models import save_checkpoint
from icd.train import METHODS, TrainConfig, train_student, train_teacher


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(Path(__file__).parent.parent / "configs" / "desk.cfg"))
    ap.add_argument("--out", default="runs/smoke")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--methods", nargs="+", default=list(METHODS), choices=METHODS)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    cfg, data_spec = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, test, _ = load_dataset(data_spec)

    t0 = time.perf_counter()
    teacher = train_teacher(cfg, train, test)
    save_checkpoint(out / "teacher", teacher.net, role="teacher")
    print(f"teacher test acc {teacher.metrics.final_test_acc:.4f}")

    table = {m: [] for m in args.methods}
    for seed in args.seeds:
        for method in args.methods:
            res = train_student(replace(cfg, seed=seed), train, test, teacher.net, method)
            (out / f"{method}_seed{seed}.csv").write_text(res.metrics.to_csv())
            table[method].append(res.metrics.final_test_acc)
            print(f"seed {seed} {method:8s} test acc {res.metrics.final_test_acc:.4f}")

    summary = {m: {"accs": v, "mean": float(np.mean(v)), "std": float(np.std(v))} for m, v in table.items()}
    summary["teacher"] = teacher.metrics.final_test_acc
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for m in args.methods:
        print(f"{m:8s} mean {summary[m]['mean']:.4f} +- {summary[m]['std']:.4f}")
    print(f"total {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
