"""Teacher/student logit-correlation discrepancy and per-scale iCD reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, batches
from .errors import ConfigurationError
from .losses import DistillConfig, icd_scale_terms
from .models import ConvNet, predict
from .scales import ScaleSpec, pool_cells
from .tensor import no_grad


def pearson_correlation(logits: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Class-by-class Pearson correlation of an [N, K] logit matrix.

    Constant columns get zero rows/columns (including the diagonal) and are
    returned in the second element.
    """
    x = logits - logits.mean(axis=0)
    norms = np.sqrt((x * x).sum(axis=0))
    const = [int(k) for k in np.flatnonzero(norms == 0)]
    safe = np.where(norms > 0, norms, 1.0)
    corr = (x.T @ x) / np.outer(safe, safe)
    corr[const, :] = 0.0
    corr[:, const] = 0.0
    live = np.flatnonzero(norms > 0)
    corr[live, live] = 1.0
    return corr, const


def logit_correlation(model: ConvNet, ds: Dataset, batch_size: int = 256) -> tuple[np.ndarray, list[int]]:
    return pearson_correlation(predict(model, ds.images, batch_size))


@dataclass
class DiscrepancyReport:
    matrix: np.ndarray
    mean_discrepancy: float
    per_scale: list[tuple[int, float]]
    constant_teacher: list[int] = field(default_factory=list)
    constant_student: list[int] = field(default_factory=list)

    @property
    def warning(self) -> bool:
        return bool(self.constant_teacher or self.constant_student)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        K = self.matrix.shape[0]
        w.writerow(["class"] + [str(k) for k in range(K)])
        for k in range(K):
            w.writerow([str(k)] + [repr(float(v)) for v in self.matrix[k]])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "mean": self.mean_discrepancy,
            "per_scale": [{"m": m, "icd": v} for m, v in self.per_scale],
            "constant_teacher_classes": self.constant_teacher,
            "constant_student_classes": self.constant_student,
            "warning": self.warning,
        }


def per_scale_icd(teacher: ConvNet, student: ConvNet, ds: Dataset, cfg: DistillConfig,
                  batch_size: int = 64) -> list[tuple[int, float]]:
    """Weighted iCD term of each scale, sample-weighted mean over in-order eval batches."""
    spec = ScaleSpec(cfg.scales, student.spec.spatial_size)
    sums = dict.fromkeys(cfg.scales, 0.0)
    total = 0
    with no_grad():
        for batch in batches(ds, batch_size):
            tc = pool_cells(teacher(batch.images), spec)
            sc = pool_cells(student(batch.images), spec)
            n = len(batch.labels)
            for m, t in icd_scale_terms(tc, sc, cfg).items():
                sums[m] += t.item() * n
            total += n
    return [(m, sums[m] / total) for m in cfg.scales]


def discrepancy(teacher: ConvNet, student: ConvNet, ds: Dataset, cfg: DistillConfig | None = None,
                batch_size: int = 64) -> DiscrepancyReport:
    if teacher.spec.num_classes != student.spec.num_classes:
        raise ConfigurationError(
            f"class counts differ: teacher {teacher.spec.num_classes}, student {student.spec.num_classes}")
    ct, const_t = logit_correlation(teacher, ds)
    cs, const_s = logit_correlation(student, ds)
    d = np.abs(ct - cs)
    per_scale = []
    if cfg is not None and teacher.spec.spatial_size == student.spec.spatial_size:
        per_scale = per_scale_icd(teacher, student, ds, cfg, batch_size)
    return DiscrepancyReport(d, float(d.mean()), per_scale, const_t, const_s)
