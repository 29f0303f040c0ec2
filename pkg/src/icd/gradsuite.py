"""Finite-difference checks for every differentiable op and the full training objective."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .gradcheck import GradCheckReport, grad_check
from .losses import DistillConfig, gram, icd_cell_loss, icd_loss, kd_loss, sdd_loss, total_loss
from .models import ConvNet, ConvNetSpec, LogitMap, global_logits, project_logit_map
from .scales import ScaleSpec, pool_cells
from .tensor import Tensor

TOLERANCE = 1e-4


def _weighted(op, out_shape, rng):
    """Scalarize ``op`` with a fixed random weighting of its output."""
    c = Tensor(rng.normal(size=out_shape))
    return lambda *xs: T.sum(T.mul(op(*xs), c))


def op_cases(rng: np.random.Generator) -> list[tuple[str, object, list[Tensor]]]:
    """(name, scalar fn, inputs) for every differentiable primitive."""
    n = rng.normal
    cases = []

    def add_case(name, op, shapes, out_shape, positive=False):
        inputs = [Tensor(np.abs(n(size=s)) + 0.5 if positive else n(size=s)) for s in shapes]
        cases.append((name, _weighted(op, out_shape, rng), inputs))

    add_case("add", T.add, [(3, 4), (4,)], (3, 4))
    add_case("sub", T.sub, [(3, 4), (3, 1)], (3, 4))
    add_case("mul", T.mul, [(2, 3, 4), (3, 4)], (2, 3, 4))
    add_case("scale", lambda x: T.scale(x, -2.5), [(3, 4)], (3, 4))
    add_case("relu", T.relu, [(4, 5)], (4, 5))
    add_case("exp", T.exp, [(3, 4)], (3, 4))
    add_case("log", T.log, [(3, 4)], (3, 4), positive=True)
    add_case("sum_axis", lambda x: T.sum(x, axis=1), [(3, 4, 2)], (3, 2))
    add_case("mean_axes", lambda x: T.mean(x, axis=(0, 2), keepdims=True), [(3, 4, 2)], (1, 4, 1))
    add_case("transpose", lambda x: T.transpose(x, (2, 0, 1)), [(2, 3, 4)], (4, 2, 3))
    add_case("reshape", lambda x: T.reshape(x, (6, 4)), [(2, 3, 4)], (6, 4))
    add_case("slice", lambda x: T.slice_axis(x, 1, 1, 3), [(3, 4)], (3, 2))
    add_case("concat", lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 2)], (2, 5))
    add_case("matmul", T.matmul, [(3, 4), (4, 2)], (3, 2))
    add_case("matmul_batched", T.matmul, [(5, 3, 4), (5, 4, 3)], (5, 3, 3))
    add_case("conv2d", lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1),
             [(2, 3, 6, 6), (4, 3, 3, 3), (4,)], (2, 4, 3, 3))
    add_case("softmax", lambda x: T.softmax(x, axis=1), [(3, 5)], (3, 5))
    add_case("log_softmax", lambda x: T.log_softmax(x, axis=0), [(4, 3)], (4, 3))
    add_case("l2_normalize", lambda x: T.l2_normalize(x, axis=-1), [(3, 4)], (3, 4))

    p_raw, q_raw = Tensor(n(size=(3, 4))), Tensor(n(size=(3, 4)))
    cases.append(("kl_divergence",
                  lambda a, b: T.kl_divergence(T.softmax(a, 1), T.softmax(b, 1), axis=1), [p_raw, q_raw]))
    cases.append(("kl_div_logits",
                  lambda a, b: T.kl_div_logits(a, b, axis=-1, temperature=2.0),
                  [Tensor(n(size=(3, 5))), Tensor(n(size=(3, 5)))]))
    labels = rng.integers(0, 4, size=5)
    cases.append(("cross_entropy", lambda x: T.cross_entropy(x, labels), [Tensor(n(size=(5, 4)))]))
    return cases


def loss_cases(rng: np.random.Generator, batch: int = 2, K: int = 3, w: int = 4, scales=(1, 2, 4)):
    """Distillation-specific ops, with gradients taken w.r.t. student-side inputs."""
    n = rng.normal
    spec = ScaleSpec(scales, w)
    teacher_map = LogitMap(Tensor(n(size=(batch, K, w, w)) * 2))
    labels = rng.integers(0, K, size=batch)
    cases = []
    W = Tensor(n(size=(5, K)))
    cases.append(("project_logit_map",
                  _weighted(lambda f: project_logit_map(f, W).values, (batch, K, w, w), rng),
                  [Tensor(n(size=(batch, 5, w, w)))]))
    cases.append(("pool_cells",
                  _weighted(lambda x: T.concat([pool_cells(x, spec)[m] for m in scales], axis=1),
                            (batch, sum(m * m for m in scales), K), rng),
                  [Tensor(n(size=(batch, K, w, w)))]))
    for mode in ("class_correlation", "sample_similarity"):
        d = K if mode == "class_correlation" else batch
        cases.append((f"gram[{mode}]", _weighted(lambda x, mode=mode: gram(x, mode), (d, d), rng),
                      [Tensor(n(size=(batch, K)))]))
        gt = gram(Tensor(n(size=(batch, K))), mode)
        cases.append((f"icd_cell_loss[{mode}]", lambda g, gt=gt: icd_cell_loss(gt, g),
                      [gram(Tensor(n(size=(batch, K))), mode).detach()]))
    cases.append(("kd_loss", lambda s: kd_loss(teacher_map, LogitMap(s), 4.0),
                  [Tensor(n(size=(batch, K, w, w)))]))
    for mode in ("class_correlation", "sample_similarity"):
        cfg = DistillConfig(scales=scales, gram_mode=mode)
        tc = pool_cells(teacher_map, spec)
        cases.append((f"sdd_loss[{mode}]", lambda s, cfg=cfg, tc=tc: sdd_loss(tc, pool_cells(s, spec), cfg),
                      [Tensor(n(size=(batch, K, w, w)))]))
        cases.append((f"icd_loss[{mode}]", lambda s, cfg=cfg, tc=tc: icd_loss(tc, pool_cells(s, spec), cfg),
                      [Tensor(n(size=(batch, K, w, w)))]))

        def objective(s, cfg=cfg, tc=tc):
            smap = LogitMap(s)
            sc = pool_cells(smap, spec)
            ce = T.cross_entropy(global_logits(smap), labels)
            return total_loss(ce, sdd_loss(tc, sc, cfg), icd_loss(tc, sc, cfg), cfg, epoch=cfg.warmup_epochs)

        cases.append((f"total_objective_logits[{mode}]", objective, [Tensor(n(size=(batch, K, w, w)))]))
    return cases


def relu_margin(net: ConvNet, x: Tensor) -> float:
    """Smallest |pre-activation| over every relu in ``net`` for input ``x``."""
    margin = np.inf
    h = x
    with T.no_grad():
        for i, (_, stride) in enumerate(net.spec.stages):
            z = T.conv2d(h, net.params[f"stage{i}.weight"], net.params[f"stage{i}.bias"], stride, 1)
            margin = min(margin, float(np.abs(z.data).min()))
            h = T.relu(z)
    return margin


def objective_case(rng: np.random.Generator, mode: str = "class_correlation", batch: int = 2, K: int = 3,
                   w: int = 4, scales=(1, 2, 4), image_size: int = 16, margin: float = 1e-4):
    """Full training objective w.r.t. every parameter of a small student network.

    Central differences are meaningless across a relu kink, so instances are
    redrawn until every student pre-activation is at least ``margin`` from zero.
    """
    cfg = DistillConfig(scales=scales, gram_mode=mode)
    spec = ScaleSpec(scales, w)
    downs = int(np.log2(image_size // w))
    strides = [2] * downs + [1] * (3 - downs)
    teacher = ConvNet(ConvNetSpec(tuple(zip((4, 6, 8, 10), strides + [1])), K, image_size), rng)
    while True:
        student = ConvNet(ConvNetSpec(tuple(zip((4, 6, 8), strides)), K, image_size), rng)
        for p in student.parameters() + teacher.parameters():  # nonzero biases exercise the bias path
            if p.ndim == 1:
                p.data = rng.normal(scale=0.1, size=p.shape)
        x = Tensor(rng.normal(size=(batch, 3, image_size, image_size)))
        if relu_margin(student, x) >= margin:
            break
    labels = rng.integers(0, K, size=batch)
    with T.no_grad():
        tc = pool_cells(teacher(x), spec)

    def objective(*params):
        smap = student(x)
        sc = pool_cells(smap, spec)
        ce = T.cross_entropy(global_logits(smap), labels)
        return total_loss(ce, sdd_loss(tc, sc, cfg), icd_loss(tc, sc, cfg), cfg, epoch=cfg.warmup_epochs)

    return f"total_objective_params[{mode}]", objective, student.parameters()


def run_suite(seed: int = 0, trials: int = 1, include_objective: bool = True,
              tolerance: float = TOLERANCE) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    reports = []
    for _ in range(trials):
        for name, fn, inputs in op_cases(rng) + loss_cases(rng):
            reports.append(grad_check(fn, inputs, tolerance, op_name=name))
    if include_objective:
        for mode in ("class_correlation", "sample_similarity"):
            name, fn, params = objective_case(rng, mode)
            reports.append(grad_check(fn, params, tolerance, op_name=name))
    return reports
