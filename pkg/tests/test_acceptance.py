"""Acceptance criteria 1-9, one test each.

Every test records a single ``criterion N: PASS|FAIL ...`` line, printed in
the terminal summary, and then asserts.
"""

import csv
import io
import time
from dataclasses import replace

import numpy as np
import pytest

import oracles
from conftest import ACCEPTANCE_LINES
from icd.cli import ABLATION_GAMMAS, ABLATION_SCALES, main
from icd.data import DatasetSpec, load_dataset
from icd.gradsuite import run_suite
from icd.losses import DistillConfig, gram, icd_loss, kd_loss, scale_weights, sdd_loss, warmup_factor
from icd.models import LogitMap
from icd.scales import ScaleSpec, pool_cells
from icd.tensor import Tensor
from icd.train import TrainConfig, lr_at, train_student, train_teacher

MODES = ("class_correlation", "sample_similarity")


def verdict(n: int, ok: bool, detail: str):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def _cells(tv, sv, scales, w=4):
    spec = ScaleSpec(scales, w)
    return pool_cells(Tensor(tv), spec), pool_cells(Tensor(sv), spec)


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    reports = run_suite(seed=0)
    dt = time.perf_counter() - t0
    worst = max(reports, key=lambda r: r.max_rel_err)
    names = {r.op_name for r in reports}
    ok = all(r.passed and r.max_rel_err <= 1e-4 for r in reports) and dt < 60
    ok = ok and {"total_objective_params[class_correlation]", "total_objective_params[sample_similarity]"} <= names
    verdict(1, ok, f"{len(reports)} checks, worst {worst.op_name} rel={worst.max_rel_err:.2e}, {dt:.1f}s")


def test_criterion_2_oracle_equivalence():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = {"kd": 0.0, "sdd": 0.0, "icd[class_correlation]": 0.0, "icd[sample_similarity]": 0.0}
    count = 100
    for _ in range(count):
        B, K = int(rng.integers(2, 5)), int(rng.integers(2, 6))
        tv = rng.normal(size=(B, K, 4, 4)) * rng.uniform(0.5, 5)
        sv = rng.normal(size=(B, K, 4, 4)) * rng.uniform(0.5, 5)
        tau = float(rng.uniform(1, 6))
        tl, sl = tv.tolist(), sv.tolist()
        got = kd_loss(LogitMap(Tensor(tv)), LogitMap(Tensor(sv)), tau).item()
        worst["kd"] = max(worst["kd"], abs(got - oracles.kd(tl, sl, tau)))
        tc, sc = _cells(tv, sv, (1, 2, 4))
        cfg = DistillConfig(temperature=tau)
        worst["sdd"] = max(worst["sdd"], abs(sdd_loss(tc, sc, cfg).item() - oracles.sdd(tl, sl, (1, 2, 4), tau)))
        for mode in MODES:
            got = icd_loss(tc, sc, replace(cfg, gram_mode=mode)).item()
            key = f"icd[{mode}]"
            worst[key] = max(worst[key], abs(got - oracles.icd(tl, sl, (1, 2, 4), mode)))
    dt = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-10 and dt < 60
    verdict(2, ok, f"{count} instances per loss, max abs diff {max(worst.values()):.1e}, {dt:.1f}s")


def test_criterion_3_reduction_identities():
    rng = np.random.default_rng(3)
    diff = 0.0
    for _ in range(100):
        tv, sv = rng.normal(size=(3, 5, 4, 4)) * 3, rng.normal(size=(3, 5, 4, 4)) * 3
        tc, sc = _cells(tv, sv, (1,))
        kd = kd_loss(LogitMap(Tensor(tv)), LogitMap(Tensor(sv)), 4.0).item()
        diff = max(diff, abs(sdd_loss(tc, sc, DistillConfig(scales=(1,))).item() - kd))

    train, test, _ = load_dataset(DatasetSpec(num_classes=4, image_size=16, train_size=128, test_size=64))
    cfg = TrainConfig(epochs=4, lr_decay_epochs=(3,), batch_size=32, seed=7,
                      distill=DistillConfig(warmup_epochs=1))
    teacher = train_teacher(cfg, train, test).net
    ce = train_student(cfg, train, test, teacher, "ce_only")
    zero = train_student(replace(cfg, distill=replace(cfg.distill, alpha=0.0, gamma=0.0)), train, test, teacher, "icd")
    same_params = all(np.array_equal(ce.net.params[n].data, zero.net.params[n].data) for n in ce.net.param_names())
    same_curve = [(e.ce, e.total, e.train_acc, e.test_acc) for e in ce.metrics.epochs] == \
                 [(e.ce, e.total, e.train_acc, e.test_acc) for e in zero.metrics.epochs]
    ok = diff <= 1e-12 and same_params and same_curve
    verdict(3, ok, f"|sdd(M={{1}}) - kd| max {diff:.1e}; alpha=gamma=0 bit-identical: {same_params and same_curve}")


def test_criterion_4_structural_invariants():
    rng = np.random.default_rng(4)
    worst = dict(sym=0.0, eig=0.0, trace=0.0, diag=0.0, scale=0.0, perm=0.0)
    for mode in MODES:
        cfg = DistillConfig(gram_mode=mode)
        for _ in range(1000):
            B, K = int(rng.integers(2, 7)), int(rng.integers(2, 7))
            x = rng.normal(size=(B, K)) * rng.uniform(0.01, 100)
            g = gram(Tensor(x), mode).data
            worst["sym"] = max(worst["sym"], np.abs(g - g.T).max())
            worst["eig"] = min(worst["eig"], np.linalg.eigvalsh(g).min())
            if mode == "class_correlation":
                worst["trace"] = max(worst["trace"], abs(np.trace(g) - B))
            else:
                worst["diag"] = max(worst["diag"], np.abs(np.diag(g) - 1).max())

            tv, sv = rng.normal(size=(B, K, 4, 4)) * 3, rng.normal(size=(B, K, 4, 4)) * 3
            base = icd_loss(*_cells(tv, sv, cfg.scales), cfg).item()
            c = rng.uniform(0.1, 10, size=(B, 1, 1, 1))
            scaled = icd_loss(*_cells(tv, sv * c, cfg.scales), cfg).item()
            perm = rng.permutation(B)
            permuted = icd_loss(*_cells(tv[perm], sv[perm], cfg.scales), cfg).item()
            worst["scale"] = max(worst["scale"], abs(scaled - base))
            worst["perm"] = max(worst["perm"], abs(permuted - base))
    wsum = max(abs(sum(scale_weights(range(1, n + 1))) - 1.0) for n in range(1, 13))
    ok = (worst["sym"] <= 1e-10 and worst["eig"] >= -1e-8 and worst["trace"] <= 1e-8 and worst["diag"] <= 1e-10
          and wsum <= 1e-15 and worst["scale"] <= 1e-12 and worst["perm"] <= 1e-10)
    verdict(4, ok, "sym {sym:.1e} mineig {eig:.1e} trace {trace:.1e} diag {diag:.1e} "
                   "scale-inv {scale:.1e} perm-inv {perm:.1e} ".format(**worst) + f"weight-sum {wsum:.1e}")


def test_criterion_5_scale_weights():
    w = scale_weights((1, 2, 4))
    verdict(5, w == [1 / 6, 1 / 3, 1 / 2], f"scale_weights(1,2,4) = {w}")


def test_criterion_6_schedule():
    full = TrainConfig()
    lrs = [lr_at(e, full) for e in (0, 149, 150, 179, 180, 209, 210, 239)]
    want = [0.05, 0.05, 0.005, 0.005, 0.0005, 0.0005, 0.00005, 0.00005]
    desk = TrainConfig(schedule_scale=0.1)
    desk_lrs = [lr_at(e, desk) for e in (14, 15, 18, 21)]
    warm = [warmup_factor(e, 30) for e in (0, 15, 30, 31, 239)]
    ok = (np.allclose(lrs, want, rtol=1e-12, atol=0) and np.allclose(desk_lrs, [0.05, 0.005, 0.0005, 0.00005],
                                                                      rtol=1e-12, atol=0)
          and warm == [0.0, 0.5, 1.0, 1.0, 1.0] and desk.warmup_epochs == 3)
    verdict(6, ok, f"lr {lrs[::2]}, scaled milestones {desk.milestones}, warm-up {warm}")


def test_criterion_7_desk_smoke():
    t0 = time.perf_counter()
    train, test, _ = load_dataset(DatasetSpec())
    base = TrainConfig(schedule_scale=0.1)
    teacher = train_teacher(base, train, test)
    acc = {"ce_only": [], "icd": []}
    finite = teacher.metrics.all_finite()
    for seed in range(3):
        cfg = replace(base, seed=seed)
        for method in acc:
            res = train_student(cfg, train, test, teacher.net, method)
            acc[method].append(res.metrics.final_test_acc)
            finite = finite and res.metrics.all_finite()
    dt = time.perf_counter() - t0
    t_acc = teacher.metrics.final_test_acc
    ce_mean, icd_mean = np.mean(acc["ce_only"]), np.mean(acc["icd"])
    ok = t_acc >= 0.9 and icd_mean >= ce_mean - 0.005 and finite and dt < 600
    verdict(7, ok, f"teacher {t_acc:.3f}, ce_only {acc['ce_only']} mean {ce_mean:.4f}, "
                   f"icd {acc['icd']} mean {icd_mean:.4f}, finite {finite}, {dt:.0f}s")


TINY = """
epochs = 2
lr_decay_epochs = 1
batch_size = 32
augment = false
warmup_epochs = 1
data.num_classes = 4
data.image_size = 16
data.train_size = 64
data.test_size = 32
"""


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    d = tmp_path_factory.mktemp("acc")
    (d / "tiny.cfg").write_text(TINY)
    return d / "tiny.cfg"


def test_criterion_8_ablation_tables(tmp_path, tiny_cfg):
    outs = {}
    for rep in ("r1", "r2"):
        d = tmp_path / rep
        assert main(["train-teacher", "--config", str(tiny_cfg), "--out", str(d)]) == 0
        for cmd in ("ablate-scales", "ablate-gamma"):
            assert main([cmd, "--teacher", str(d / "teacher"), "--config", str(tiny_cfg), "--out", str(d)]) == 0
        outs[rep] = {n: (d / n).read_text() for n in ("ablate_scales.csv", "ablate_gamma.csv")}
    scales_rows = list(csv.reader(io.StringIO(outs["r1"]["ablate_scales.csv"])))
    gamma_rows = list(csv.reader(io.StringIO(outs["r1"]["ablate_gamma.csv"])))
    want_scales = ["KD"] + ["M={" + ",".join(map(str, ms)) + "}" for ms in ABLATION_SCALES]
    want_gamma = ["KD"] + [f"gamma={g}" for g in ABLATION_GAMMAS]

    def complete(rows, keys):
        if rows[0] != ["setting", "test_acc"] or [r[0] for r in rows[1:]] != keys:
            return False
        return all(len(r) == 2 and 0.0 <= float(r[1]) <= 1.0 for r in rows[1:])

    ok = complete(scales_rows, want_scales) and complete(gamma_rows, want_gamma) and outs["r1"] == outs["r2"]
    verdict(8, ok, f"{len(scales_rows) - 1} scale rows, {len(gamma_rows) - 1} gamma rows, "
                   f"rerun identical: {outs['r1'] == outs['r2']}")


def test_criterion_9_determinism(tmp_path, tiny_cfg):
    def run_all(d):
        c = ["--config", str(tiny_cfg), "--out", str(d)]
        codes = [main(["train-teacher", *c])]
        t = str(d / "teacher")
        for m in ("ce", "kd", "sdd", "icd"):
            codes.append(main(["train-student", "--method", m, "--teacher", t, *c]))
        s = str(d / "student_icd")
        codes.append(main(["eval", "--checkpoint", s, *c]))
        codes.append(main(["gram-dump", "--teacher", t, "--student", s, *c]))
        codes.append(main(["discrepancy", "--teacher", t, "--student", s, *c]))
        files = sorted(p for p in d.rglob("*") if p.suffix in (".csv", ".json", ".bin", ".txt"))
        return codes, {p.relative_to(d).as_posix(): p.read_bytes() for p in files}

    codes1, a = run_all(tmp_path / "a")
    codes2, b = run_all(tmp_path / "b")
    differ = sorted(k for k in a if a[k] != b.get(k))
    ok = codes1 == codes2 == [0] * 8 and a.keys() == b.keys() and not differ
    verdict(9, ok, f"{len(a)} output files compared, differing: {differ or 'none'}")
