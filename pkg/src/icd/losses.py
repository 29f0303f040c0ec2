"""KD, scale-decoupled KD and Gram-structure (iCD) losses, plus the total objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from . import serialize
from .errors import ConfigurationError, DimensionError, DivergenceError
from .models import LogitMap, global_logits
from .scales import CellLogits
from .tensor import Tensor, kl_div_logits, l2_normalize, matmul, transpose

GRAM_MODES = ("class_correlation", "sample_similarity")


@dataclass(frozen=True)
class DistillConfig:
    scales: tuple[int, ...] = (1, 2, 4)
    temperature: float = 4.0
    alpha: float = 1.0
    gamma: float = 2.0
    warmup_epochs: int = 30
    gram_mode: str = "class_correlation"
    eps: float = 1e-12
    kd_weight: float | None = None  # None -> alpha
    tau_squared: bool = True  # multiply KL-on-probabilities losses by T^2
    cell_mean: bool = False  # average iCD cell terms per scale instead of summing

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(m) for m in self.scales))
        if not self.scales:
            raise ConfigurationError("scale set is empty")
        if self.scales[0] < 1 or any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ConfigurationError(f"scales {self.scales} must be positive and strictly increasing")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be > 0")
        if self.alpha < 0 or self.gamma < 0:
            raise ConfigurationError("alpha and gamma must be >= 0")
        if self.kd_weight is not None and self.kd_weight < 0:
            raise ConfigurationError("kd_weight must be >= 0")
        if self.warmup_epochs < 0:
            raise ConfigurationError("warmup_epochs must be >= 0")
        if self.gram_mode not in GRAM_MODES:
            raise ConfigurationError(f"gram_mode must be one of {GRAM_MODES}")
        if self.eps <= 0:
            raise ConfigurationError("eps must be > 0")

    @property
    def effective_kd_weight(self) -> float:
        return self.alpha if self.kd_weight is None else self.kd_weight


@dataclass
class GramPair:
    m: int
    n: int
    teacher: np.ndarray
    student: np.ndarray
    mode: str = field(default="class_correlation")


def _tau_factor(tau: float, on: bool) -> float:
    return tau * tau if on else 1.0


def kd_loss(teacher_map: LogitMap, student_map: LogitMap, temperature: float = 4.0,
            tau_squared: bool = True) -> Tensor:
    """Hinton KD on globally averaged logits; the teacher side is detached."""
    if teacher_map.values.shape != student_map.values.shape:
        raise DimensionError(f"teacher map {teacher_map.values.shape} vs student {student_map.values.shape}")
    pt = global_logits(teacher_map).detach()
    ps = global_logits(student_map)
    return kl_div_logits(pt, ps, axis=-1, temperature=temperature) * _tau_factor(temperature, tau_squared)


def _check_cells(teacher: CellLogits, student: CellLogits, cfg: DistillConfig):
    for m in cfg.scales:
        if m not in teacher.by_scale or m not in student.by_scale:
            raise ConfigurationError(f"scale {m} missing from cell logits")
        if teacher[m].shape != student[m].shape:
            raise ConfigurationError(f"scale {m}: teacher cells {teacher[m].shape} vs student {student[m].shape}")


def sdd_loss(teacher_cells: CellLogits, student_cells: CellLogits, cfg: DistillConfig) -> Tensor:
    """Sum over scales and cells of batch-averaged, temperature-scaled KL."""
    _check_cells(teacher_cells, student_cells, cfg)
    factor = _tau_factor(cfg.temperature, cfg.tau_squared)
    total = None
    for m in cfg.scales:
        n_cells = student_cells[m].shape[1]
        # kl_div_logits averages over batch*cells rows; rescale to a sum over cells
        term = kl_div_logits(teacher_cells[m].detach(), student_cells[m], -1, cfg.temperature) * (n_cells * factor)
        total = term if total is None else total + term
    return total


def gram(cells: Tensor, mode: str = "class_correlation", eps: float = 1e-12) -> Tensor:
    """Gram matrix of row-normalized cell logits.

    ``cells`` is [..., batch, K]. class_correlation gives X^T X ([..., K, K]);
    sample_similarity gives X X^T ([..., batch, batch]).
    """
    if cells.ndim < 2:
        raise DimensionError(f"gram needs [..., batch, K], got {cells.shape}")
    x = l2_normalize(cells, axis=-1, eps=eps)
    xt = transpose(x, tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2))
    if mode == "class_correlation":
        return matmul(xt, x)
    if mode == "sample_similarity":
        return matmul(x, xt)
    raise ConfigurationError(f"unknown gram mode {mode!r}")


def icd_cell_loss(g_teacher: Tensor, g_student: Tensor) -> Tensor:
    """Row-wise softmax of each Gram matrix, KL(teacher || student) averaged over rows."""
    if g_teacher.shape != g_student.shape:
        raise DimensionError(f"gram shapes {g_teacher.shape} and {g_student.shape} differ")
    return kl_div_logits(g_teacher.detach(), g_student, axis=-1, temperature=1.0)


def scale_weights(scales) -> list[float]:
    """Rank-proportional weights, finer scales heavier: i / sum(1..|M|)."""
    scales = sorted(scales)
    if not scales:
        raise ConfigurationError("scale set is empty")
    n = len(scales)
    denom = n * (n + 1) // 2
    return [i / denom for i in range(1, n + 1)]


def icd_scale_terms(teacher_cells: CellLogits, student_cells: CellLogits, cfg: DistillConfig) -> dict[int, Tensor]:
    """Weighted iCD contribution of each scale: W_m * sum_n D(m, n)."""
    _check_cells(teacher_cells, student_cells, cfg)
    weights = dict(zip(sorted(cfg.scales), scale_weights(cfg.scales)))
    out = {}
    for m in cfg.scales:
        # [B, N, K] -> [N, B, K]: one Gram matrix per cell
        gt = gram(transpose(teacher_cells[m].detach(), (1, 0, 2)), cfg.gram_mode, cfg.eps)
        gs = gram(transpose(student_cells[m], (1, 0, 2)), cfg.gram_mode, cfg.eps)
        n_cells = gs.shape[0]
        # icd_cell_loss over the stack averages over all N*d rows; N * that = sum over cells
        per_cell = 1.0 if cfg.cell_mean else float(n_cells)
        out[m] = icd_cell_loss(gt, gs) * (weights[m] * per_cell)
    return out


def icd_loss(teacher_cells: CellLogits, student_cells: CellLogits, cfg: DistillConfig) -> Tensor:
    terms = icd_scale_terms(teacher_cells, student_cells, cfg)
    total = None
    for m in cfg.scales:
        total = terms[m] if total is None else total + terms[m]
    return total


def gram_pairs(teacher_cells: CellLogits, student_cells: CellLogits, cfg: DistillConfig) -> list[GramPair]:
    _check_cells(teacher_cells, student_cells, cfg)
    pairs = []
    for m in cfg.scales:
        gt = gram(transpose(teacher_cells[m], (1, 0, 2)), cfg.gram_mode, cfg.eps).data
        gs = gram(transpose(student_cells[m], (1, 0, 2)), cfg.gram_mode, cfg.eps).data
        for n in range(gt.shape[0]):
            pairs.append(GramPair(m, n, gt[n].copy(), gs[n].copy(), cfg.gram_mode))
    return pairs


def write_gram_dump(fh: BinaryIO, pairs: list[GramPair]) -> None:
    """Per pair: text line ``"m n d mode\\n"`` then ICDT blobs for G_T and G_S."""
    for p in pairs:
        fh.write(f"{p.m} {p.n} {p.teacher.shape[0]} {p.mode}\n".encode("ascii"))
        serialize.write_tensor(fh, p.teacher)
        serialize.write_tensor(fh, p.student)


def read_gram_dump(fh: BinaryIO) -> list[GramPair]:
    pairs = []
    while True:
        line = fh.readline()
        if not line:
            return pairs
        m, n, d, mode = line.decode("ascii").split()
        gt = serialize.read_tensor(fh)
        gs = serialize.read_tensor(fh)
        if gt.shape != (int(d), int(d)) or gs.shape != gt.shape:
            raise DimensionError(f"gram record ({m},{n}) has shapes {gt.shape}, {gs.shape}; header says d={d}")
        pairs.append(GramPair(int(m), int(n), gt, gs, mode))


def warmup_factor(epoch: float, warmup_epochs: float) -> float:
    if warmup_epochs <= 0:
        return 1.0
    return min(1.0, epoch / warmup_epochs)


def total_loss(ce: Tensor, sdd: Tensor | None, icd: Tensor | None, cfg: DistillConfig, epoch: float,
               warmup_epochs: float | None = None) -> Tensor:
    """ce + warmup * (alpha * sdd + gamma * icd).

    Terms whose coefficient is zero are left out of the graph entirely, so
    alpha = gamma = 0 (or warm-up factor 0) is exactly plain cross entropy.
    """
    for name, t in (("ce", ce), ("sdd", sdd), ("icd", icd)):
        if t is not None and not math.isfinite(t.item()):
            raise DivergenceError(f"non-finite {name} loss: {t.item()}", term=name)
    warm = warmup_factor(epoch, cfg.warmup_epochs if warmup_epochs is None else warmup_epochs)
    out = ce
    for coef, term in ((cfg.alpha, sdd), (cfg.gamma, icd)):
        if term is not None and coef * warm != 0.0:
            out = out + term * (warm * coef)
    return out
