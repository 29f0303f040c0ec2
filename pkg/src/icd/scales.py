"""Multi-scale cell partitions of a logit map and per-cell average pooling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

from .errors import ConfigurationError, DimensionError
from .models import LogitMap
from .tensor import Tensor, transpose


@dataclass(frozen=True)
class ScaleSpec:
    scales: tuple[int, ...]
    map_width: int

    def __post_init__(self):
        scales = tuple(int(m) for m in self.scales)
        object.__setattr__(self, "scales", scales)
        if not scales:
            raise ConfigurationError("scale set is empty")
        if any(b <= a for a, b in zip(scales, scales[1:])) or scales[0] < 1:
            raise ConfigurationError(f"scales {scales} must be positive and strictly increasing")
        if self.map_width < 1:
            raise ConfigurationError("map_width must be positive")
        for m in scales:
            if self.map_width % m:
                raise ConfigurationError(f"scale {m} does not divide map width {self.map_width}")

    def num_cells(self, m: int) -> int:
        return m * m


class Cell(NamedTuple):
    row: int
    col: int
    height: int
    width: int


def cell_grid(spec: ScaleSpec, m: int) -> list[Cell]:
    """The m*m non-overlapping cells of scale ``m``, enumerated row-major."""
    if m not in spec.scales:
        raise ConfigurationError(f"scale {m} not in {spec.scales}")
    s = spec.map_width // m
    return [Cell(r * s, c * s, s, s) for r in range(m) for c in range(m)]


@dataclass
class CellLogits:
    """Per scale m, a Tensor [batch, m*m, K] of cell-averaged logits."""

    by_scale: dict[int, Tensor]

    @property
    def scales(self) -> tuple[int, ...]:
        return tuple(self.by_scale)

    def __getitem__(self, m: int) -> Tensor:
        return self.by_scale[m]


def pool_scale(values: Tensor, m: int) -> Tensor:
    """Average a [B, K, w, w] map over each (w/m)x(w/m) cell -> [B, m*m, K]."""
    B, K, h, w = values.shape
    s = w // m
    pooled = values.reshape(B, K, m, s, m, s).mean(axis=(3, 5))
    return transpose(pooled.reshape(B, K, m * m), (0, 2, 1))


def pool_cells(lmap: LogitMap | Tensor, spec: ScaleSpec) -> CellLogits:
    values = lmap.values if isinstance(lmap, LogitMap) else lmap
    if values.ndim != 4 or values.shape[2] != spec.map_width or values.shape[3] != spec.map_width:
        raise DimensionError(f"logit map {values.shape} does not have width {spec.map_width}")
    return CellLogits({m: pool_scale(values, m) for m in spec.scales})
