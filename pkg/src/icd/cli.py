"""Command-line entry point: ``icd <subcommand> [options]``.

Exit codes: 0 run completed and spot checks passed, 1 a spot check failed,
3 the run aborted (divergence, bad configuration, malformed input).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .analysis import discrepancy
from .config import format_config, load_config
from .data import DatasetSpec, batches, load_dataset
from .errors import ConfigurationError, DivergenceError, FormatError
from .losses import DistillConfig, gram_pairs, write_gram_dump
from .models import ConvNet, accuracy, load_checkpoint, save_checkpoint
from .scales import ScaleSpec, pool_cells
from .tensor import no_grad
from .train import METHOD_ALIASES, TrainConfig, run_summary, train_student, train_teacher

log = logging.getLogger("icd")

ABLATION_SCALES = ((1,), (2,), (4,), (1, 2), (1, 4), (2, 4), (1, 2, 4))
ABLATION_GAMMAS = (1, 2, 3, 4, 5, 6, 7, 8)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _param_digest(net: ConvNet) -> str:
    h = hashlib.sha256()
    for t in net.parameters():
        h.update(t.data.tobytes())
    return h.hexdigest()


class Run:
    """Resolved configuration, dataset and output directory for one command."""

    def __init__(self, args):
        if args.config:
            self.train_cfg, self.data_spec = load_config(args.config)
        else:
            self.train_cfg, self.data_spec = TrainConfig(), DatasetSpec()
        if args.seed is not None:
            self.train_cfg = replace(self.train_cfg, seed=args.seed)
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.failures: list[str] = []
        self._data = None

    @property
    def data(self):
        if self._data is None:
            self._data = load_dataset(self.data_spec)
        return self._data

    def check(self, ok: bool, what: str):
        if not ok:
            log.error("spot check failed: %s", what)
            self.failures.append(what)

    def save_config(self):
        (self.out / "config.txt").write_text(format_config(self.train_cfg, self.data_spec))


def _teacher(run: Run, args) -> ConvNet:
    if getattr(args, "teacher", None):
        net, _ = load_checkpoint(args.teacher)
        return net
    train, test, _ = run.data
    res = train_teacher(run.train_cfg, train, test)
    save_checkpoint(run.out / "teacher", res.net, role="teacher", epoch=len(res.metrics.epochs),
                    seed=run.train_cfg.seed, test_acc=repr(res.metrics.final_test_acc))
    return res.net


def cmd_train_teacher(run: Run, args):
    train, test, norm = run.data
    res = train_teacher(run.train_cfg, train, test)
    m = res.metrics
    save_checkpoint(run.out / "teacher", res.net, role="teacher", epoch=len(m.epochs),
                    seed=run.train_cfg.seed, test_acc=repr(m.final_test_acc))
    (run.out / "teacher_metrics.csv").write_text(m.to_csv())
    _write_json(run.out / "teacher_summary.json", {**run_summary(res), "normalization": norm})
    run.check(m.all_finite(), "teacher metrics contain non-finite values")
    run.check(m.epochs[-1].total <= m.epochs[0].total, "teacher loss did not decrease")


def cmd_train_student(run: Run, args):
    method = METHOD_ALIASES[args.method]
    train, test, norm = run.data
    teacher = _teacher(run, args)
    before = _param_digest(teacher)
    res = train_student(run.train_cfg, train, test, teacher, method)
    m = res.metrics
    name = f"student_{method}"
    save_checkpoint(run.out / name, res.net, role="student", method=method, epoch=len(m.epochs),
                    seed=run.train_cfg.seed, test_acc=repr(m.final_test_acc))
    (run.out / f"{name}_metrics.csv").write_text(m.to_csv())
    _write_json(run.out / f"{name}_summary.json", {**run_summary(res), "normalization": norm})
    run.check(m.all_finite(), "student metrics contain non-finite values")
    run.check(m.max_total_residual <= 1e-10, f"total loss residual {m.max_total_residual:.3e} > 1e-10")
    run.check(_param_digest(teacher) == before, "teacher parameters changed during student training")


def cmd_eval(run: Run, args):
    net, manifest = load_checkpoint(args.checkpoint)
    train, test, _ = run.data
    out = {
        "checkpoint_role": manifest.get("role", ""),
        "test_acc": accuracy(net, test.images, test.labels),
        "train_acc": accuracy(net, train.images, train.labels),
    }
    _write_json(run.out / "eval.json", out)
    print(json.dumps(out, sort_keys=True))


def cmd_grad_check(run: Run, args):
    from .gradsuite import run_suite
    reports = run_suite(seed=run.train_cfg.seed)
    lines = ["op,max_abs_err,max_rel_err,tolerance,passed"]
    for r in reports:
        lines.append(f"{r.op_name},{r.max_abs_err!r},{r.max_rel_err!r},{r.tolerance!r},{int(r.passed)}")
        print(r.line())
        run.check(r.passed, f"gradient check {r.op_name}")
    (run.out / "grad_check.csv").write_text("\n".join(lines) + "\n")
    _write_json(run.out / "grad_check.json", {"passed": all(r.passed for r in reports), "count": len(reports)})


def cmd_gram_dump(run: Run, args):
    teacher, _ = load_checkpoint(args.teacher)
    student, _ = load_checkpoint(args.student)
    _, test, _ = run.data
    cfg = run.train_cfg.distill
    spec = ScaleSpec(cfg.scales, student.spec.spatial_size)
    batch = next(batches(test, args.batch or run.train_cfg.batch_size))
    with no_grad():
        pairs = gram_pairs(pool_cells(teacher(batch.images), spec), pool_cells(student(batch.images), spec), cfg)
    with open(run.out / "grams.bin", "wb") as fh:
        write_gram_dump(fh, pairs)
    for p in pairs:
        for g in (p.teacher, p.student):
            run.check(np.allclose(g, g.T, atol=1e-10), f"gram ({p.m},{p.n}) not symmetric")
    print(f"wrote {len(pairs)} gram pairs")


def _ablate(run: Run, args, rows, header: tuple[str, str], filename: str):
    train, test, _ = run.data
    teacher = _teacher(run, args)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    kd = train_student(run.train_cfg, train, test, teacher, "kd")
    w.writerow(["KD", repr(kd.metrics.final_test_acc)])
    run.check(kd.metrics.all_finite(), "KD baseline non-finite")
    for key, cfg in rows:
        res = train_student(replace(run.train_cfg, distill=cfg), train, test, teacher, "icd")
        w.writerow([key, repr(res.metrics.final_test_acc)])
        run.check(res.metrics.all_finite(), f"{key} non-finite")
        print(f"{key}: {res.metrics.final_test_acc:.4f}")
    (run.out / filename).write_text(buf.getvalue())


def cmd_ablate_scales(run: Run, args):
    base = run.train_cfg.distill
    rows = [("M={" + ",".join(map(str, ms)) + "}", replace(base, scales=ms)) for ms in ABLATION_SCALES]
    _ablate(run, args, rows, ("setting", "test_acc"), "ablate_scales.csv")


def cmd_ablate_gamma(run: Run, args):
    base = run.train_cfg.distill
    gammas = [float(g) for g in args.gammas.split(",")] if args.gammas else ABLATION_GAMMAS
    rows = [(f"gamma={g:g}", replace(base, gamma=float(g))) for g in gammas]
    _ablate(run, args, rows, ("setting", "test_acc"), "ablate_gamma.csv")


def cmd_discrepancy(run: Run, args):
    teacher, _ = load_checkpoint(args.teacher)
    student, _ = load_checkpoint(args.student)
    _, test, _ = run.data
    report = discrepancy(teacher, student, test, run.train_cfg.distill, run.train_cfg.batch_size)
    (run.out / "discrepancy.csv").write_text(report.to_csv())
    _write_json(run.out / "discrepancy.json", report.summary())
    d = report.matrix
    run.check(bool(np.all(d >= 0)) and np.allclose(d, d.T, atol=1e-12), "discrepancy matrix not symmetric/nonnegative")
    print(f"mean discrepancy {report.mean_discrepancy:.6f}")


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "train-student": cmd_train_student,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
    "gram-dump": cmd_gram_dump,
    "ablate-scales": cmd_ablate_scales,
    "ablate-gamma": cmd_ablate_gamma,
    "discrepancy": cmd_discrepancy,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icd", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="override the training seed")
    common.add_argument("--out", default="runs", help="output directory (default: runs)")
    common.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train-teacher", parents=[common], help="train the label-only teacher")
    p = sub.add_parser("train-student", parents=[common], help="train a student against a teacher")
    p.add_argument("--method", choices=sorted(METHOD_ALIASES), required=True)
    p.add_argument("--teacher", help="teacher checkpoint dir (trained first if omitted)")
    p = sub.add_parser("eval", parents=[common], help="test accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    sub.add_parser("grad-check", parents=[common], help="finite-difference gradient suite")
    p = sub.add_parser("gram-dump", parents=[common], help="write teacher/student Gram matrices")
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--batch", type=int, help="samples in the dumped batch (default: batch_size)")
    for name in ("ablate-scales", "ablate-gamma"):
        p = sub.add_parser(name, parents=[common], help=f"iCD {name[7:]} ablation table")
        p.add_argument("--teacher", help="teacher checkpoint dir (trained first if omitted)")
        if name == "ablate-gamma":
            p.add_argument("--gammas", help="comma-separated gamma values (default 1..8)")
    p = sub.add_parser("discrepancy", parents=[common], help="logit-correlation discrepancy report")
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = Run(args)
        run.save_config()
        COMMANDS[args.command](run, args)
    except (DivergenceError, ConfigurationError, FormatError, FileNotFoundError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 3
    return 1 if run.failures else 0


if __name__ == "__main__":
    sys.exit(main())
