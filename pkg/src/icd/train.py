"""SGD training for the label-only teacher and the distilled students."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .data import Batch, Dataset, batches
from .errors import ConfigurationError, DivergenceError, NonFiniteError
from .losses import DistillConfig, icd_loss, kd_loss, sdd_loss, total_loss, warmup_factor
from .models import ConvNet, ConvNetSpec, accuracy, global_logits, student_spec, teacher_spec
from .scales import ScaleSpec, pool_cells
from .tensor import Tensor, cross_entropy, no_grad

log = logging.getLogger(__name__)

METHODS = ("ce_only", "kd", "sdd", "icd")
METHOD_ALIASES = {"ce": "ce_only", "ce_only": "ce_only", "kd": "kd", "sdd": "sdd", "icd": "icd"}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 240
    batch_size: int = 64
    lr: float = 0.05
    student_lr: float | None = 0.005  # None -> lr
    lr_decay_epochs: tuple[int, ...] = (150, 180, 210)
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    schedule_scale: float = 1.0
    augment: bool = True
    map_width: int = 4
    distill: DistillConfig = field(default_factory=DistillConfig)

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.student_lr is not None and self.student_lr <= 0:
            raise ConfigurationError("student_lr must be positive")
        if self.lr <= 0 or self.lr_decay_factor <= 0 or self.schedule_scale <= 0:
            raise ConfigurationError("lr, lr_decay_factor and schedule_scale must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigurationError("momentum and weight_decay must be >= 0")
        ms = self.lr_decay_epochs
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigurationError(f"lr_decay_epochs {ms} must be strictly increasing")
        if ms and ms[-1] >= self.epochs:
            raise ConfigurationError(f"lr decay epoch {ms[-1]} is not before epochs={self.epochs}")

    @property
    def total_epochs(self) -> int:
        return max(1, round(self.epochs * self.schedule_scale))

    @property
    def milestones(self) -> tuple[int, ...]:
        return tuple(round(m * self.schedule_scale) for m in self.lr_decay_epochs)

    @property
    def warmup_epochs(self) -> int:
        return round(self.distill.warmup_epochs * self.schedule_scale)


def lr_at(epoch: int, cfg: TrainConfig, base_lr: float | None = None) -> float:
    """Base lr decayed once for every (scaled) milestone <= epoch."""
    passed = sum(1 for m in cfg.milestones if m <= epoch)
    return (cfg.lr if base_lr is None else base_lr) * cfg.lr_decay_factor ** passed


def sgd_step(params: list[Tensor], grads: list[np.ndarray], velocity: list[np.ndarray],
             lr: float, momentum: float = 0.9, weight_decay: float = 5e-4) -> None:
    """v <- momentum*v + (g + wd*p); p <- p - lr*v. Weight decay applies to every parameter."""
    if not (len(params) == len(grads) == len(velocity)):
        raise ConfigurationError("params, grads and velocity lengths differ")
    for p, g, v in zip(params, grads, velocity):
        if g.shape != p.shape or v.shape != p.shape:
            raise ConfigurationError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient", term="grad")
    for i, (p, g) in enumerate(zip(params, grads)):
        velocity[i] = momentum * velocity[i] + (g + weight_decay * p.data)
        p.data = p.data - lr * velocity[i]


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    warmup: float
    ce: float
    kd: float
    sdd: float
    icd: float
    total: float
    train_acc: float
    test_acc: float
    seconds: float = 0.0


CSV_FIELDS = ("epoch", "lr", "warmup", "ce", "kd", "sdd", "icd", "total", "train_acc", "test_acc")


@dataclass
class RunMetrics:
    epochs: list[EpochMetrics] = field(default_factory=list)
    max_total_residual: float = 0.0  # |logged total - recomputed total|, max over batches

    def to_csv(self) -> str:
        """Deterministic CSV; wall-clock seconds are deliberately left out."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for e in self.epochs:
            w.writerow([getattr(e, k) if k == "epoch" else repr(float(getattr(e, k))) for k in CSV_FIELDS])
        return buf.getvalue()

    @property
    def final_test_acc(self) -> float:
        return self.epochs[-1].test_acc if self.epochs else 0.0

    def all_finite(self) -> bool:
        return all(math.isfinite(getattr(e, k)) for e in self.epochs for k in CSV_FIELDS)


@dataclass
class TrainResult:
    net: ConvNet
    metrics: RunMetrics
    method: str
    seed: int


def _param_rng(seed: int, role: int) -> np.random.Generator:
    return np.random.default_rng([seed, role])


StepFn = Callable[[Batch, int, float], tuple[Tensor, dict, Tensor]]


def _fit(net: ConvNet, cfg: TrainConfig, train: Dataset, test: Dataset, step: StepFn,
         base_lr: float, eval_batch: int = 256) -> RunMetrics:
    params = net.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    metrics = RunMetrics()
    for epoch in range(cfg.total_epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg, base_lr)
        warm = warmup_factor(epoch, cfg.warmup_epochs)
        sums = dict.fromkeys(("ce", "kd", "sdd", "icd", "total"), 0.0)
        correct = seen = 0
        for bi, batch in enumerate(batches(train, cfg.batch_size, cfg.seed, epoch, cfg.augment)):
            for p in params:
                p.grad = None
            try:
                loss, comps, logits = step(batch, epoch, warm)
                loss.backward()
                sgd_step(params, [p.grad for p in params], velocity, lr, cfg.momentum, cfg.weight_decay)
            except NonFiniteError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch}, batch {bi}: {exc}",
                                      term=getattr(exc, "term", None), epoch=epoch, batch=bi) from exc
            n = len(batch.labels)
            metrics.max_total_residual = max(metrics.max_total_residual, comps.pop("residual", 0.0))
            for k, v in comps.items():
                sums[k] += v * n
            correct += int(np.sum(logits.data.argmax(axis=1) == batch.labels))
            seen += n
        try:
            test_acc = accuracy(net, test.images, test.labels, eval_batch)
        except NonFiniteError as exc:
            raise DivergenceError(f"evaluation diverged after epoch {epoch}: {exc}", epoch=epoch) from exc
        row = EpochMetrics(epoch, lr, warm, *(sums[k] / seen for k in ("ce", "kd", "sdd", "icd", "total")),
                           correct / seen, test_acc, time.perf_counter() - t0)
        metrics.epochs.append(row)
        log.info("epoch %d lr=%.5f warm=%.2f ce=%.4f kd=%.4f sdd=%.4f icd=%.4f train=%.3f test=%.3f (%.1fs)",
                 epoch, lr, warm, row.ce, row.kd, row.sdd, row.icd, row.train_acc, row.test_acc, row.seconds)
    return metrics


def train_teacher(cfg: TrainConfig, train: Dataset, test: Dataset, spec: ConvNetSpec | None = None) -> TrainResult:
    spec = spec or teacher_spec(train.num_classes, train.images.shape[-1], cfg.map_width)
    net = ConvNet(spec, _param_rng(cfg.seed, 0))

    def step(batch, epoch, warm):
        logits = global_logits(net(batch.images))
        ce = cross_entropy(logits, batch.labels)
        v = ce.item()
        return ce, {"ce": v, "total": v}, logits

    return TrainResult(net, _fit(net, cfg, train, test, step, cfg.lr), "teacher", cfg.seed)


def train_student(cfg: TrainConfig, train: Dataset, test: Dataset, teacher: ConvNet, method: str,
                  spec: ConvNetSpec | None = None) -> TrainResult:
    """Teacher stays frozen; ``method`` picks the objective added to cross entropy."""
    method = METHOD_ALIASES.get(method, method)
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}; expected one of {METHODS}")
    spec = spec or student_spec(train.num_classes, train.images.shape[-1], cfg.map_width)
    tspec = teacher.spec
    if tspec.num_classes != spec.num_classes or tspec.spatial_size != spec.spatial_size:
        raise ConfigurationError(
            f"teacher (K={tspec.num_classes}, w={tspec.spatial_size}) and student "
            f"(K={spec.num_classes}, w={spec.spatial_size}) logit maps must match")
    dcfg = cfg.distill
    scale_spec = ScaleSpec(dcfg.scales, spec.spatial_size) if method in ("sdd", "icd") else None
    net = ConvNet(spec, _param_rng(cfg.seed, 1))

    def step(batch, epoch, warm):
        smap = net(batch.images)
        logits = global_logits(smap)
        ce = cross_entropy(logits, batch.labels)
        comps = {"ce": ce.item()}
        if method == "ce_only":
            loss = ce
        else:
            with no_grad():
                tmap = teacher(batch.images)
            if method == "kd":
                kd = kd_loss(tmap, smap, dcfg.temperature, dcfg.tau_squared)
                wkd = dcfg.effective_kd_weight
                loss = ce + kd * wkd if wkd else ce
                comps["kd"] = kd.item()
                comps["residual"] = abs(loss.item() - (comps["ce"] + wkd * comps["kd"]))
            elif warm == 0.0:
                # distillation terms carry zero weight during the first warm-up epoch
                loss = ce
                comps["sdd"] = comps["icd"] = 0.0
            else:
                tc, sc = pool_cells(tmap, scale_spec), pool_cells(smap, scale_spec)
                sdd = sdd_loss(tc, sc, dcfg)
                icd = icd_loss(tc, sc, dcfg) if method == "icd" else None
                loss = total_loss(ce, sdd, icd, dcfg, epoch, cfg.warmup_epochs)
                comps["sdd"] = sdd.item()
                comps["icd"] = icd.item() if icd is not None else 0.0
                expect = comps["ce"] + warm * (dcfg.alpha * comps["sdd"] + dcfg.gamma * comps["icd"])
                comps["residual"] = abs(loss.item() - expect)
        comps["total"] = loss.item()
        return loss, comps, logits

    base_lr = cfg.lr if cfg.student_lr is None else cfg.student_lr
    return TrainResult(net, _fit(net, cfg, train, test, step, base_lr), method, cfg.seed)


def run_summary(result: TrainResult) -> dict:
    m = result.metrics
    return {
        "method": result.method,
        "seed": result.seed,
        "epochs": len(m.epochs),
        "final_test_acc": m.final_test_acc,
        "final_train_acc": m.epochs[-1].train_acc if m.epochs else 0.0,
        "all_finite": m.all_finite(),
        "max_total_residual": m.max_total_residual,
    }


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
