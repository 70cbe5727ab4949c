"""Batch latency model ``cost(batch_size, k_active)`` consulted by the schedulers."""

from __future__ import annotations

import bisect
import csv
import json
from dataclasses import dataclass
from os import PathLike
from pathlib import Path
from typing import Union

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class AnalyticPerf:
    """``fixed_s + batch * (per_token_s + k * per_token_per_k_s)``."""

    fixed_s: float
    per_token_s: float
    per_token_per_k_s: float

    def __post_init__(self):
        if not self.fixed_s > 0:
            raise ValidationError(f"fixed_s must be > 0, got {self.fixed_s}")
        if self.per_token_s < 0 or self.per_token_per_k_s < 0:
            raise ValidationError("per-token coefficients must be >= 0")

    def cost(self, batch: int, k_active: int) -> float:
        return self.fixed_s + batch * (self.per_token_s + k_active * self.per_token_per_k_s)

    def overhead(self, k_active: int) -> float:
        return self.fixed_s

    def to_doc(self) -> dict:
        return {
            "kind": "analytic",
            "fixed_s": self.fixed_s,
            "per_token_s": self.per_token_s,
            "per_token_per_k_s": self.per_token_per_k_s,
        }


@dataclass(frozen=True)
class PerfTable:
    """Benchmarked grid; bilinear inside, clamped to the edge values outside."""

    batch_axis: tuple[int, ...]
    k_axis: tuple[int, ...]
    latencies: np.ndarray  # len(batch_axis) x len(k_axis), seconds

    def __post_init__(self):
        lat = np.array(self.latencies, dtype=np.float64, copy=True)
        if not self.batch_axis or not self.k_axis:
            raise ValidationError("perf table is empty")
        if lat.shape != (len(self.batch_axis), len(self.k_axis)):
            raise ValidationError(f"latency grid shape {lat.shape} does not match axes")
        for name, axis in (("batch", self.batch_axis), ("k", self.k_axis)):
            if any(b <= a for a, b in zip(axis, axis[1:])):
                raise ValidationError(f"{name} axis must be strictly increasing")
        bad = np.argwhere(~(lat > 0) | ~np.isfinite(lat))
        if len(bad):
            i, j = bad[0]
            raise ValidationError(
                f"latency at (batch={self.batch_axis[i]}, k={self.k_axis[j]}) must be a positive number"
            )
        for i in range(lat.shape[0]):
            for j in range(lat.shape[1]):
                if i > 0 and lat[i, j] < lat[i - 1, j]:
                    raise ValidationError(
                        f"latency decreases along batch at (batch={self.batch_axis[i]}, k={self.k_axis[j]})"
                    )
                if j > 0 and lat[i, j] < lat[i, j - 1]:
                    raise ValidationError(
                        f"latency decreases along k at (batch={self.batch_axis[i]}, k={self.k_axis[j]})"
                    )
        lat.flags.writeable = False
        object.__setattr__(self, "latencies", lat)

    @staticmethod
    def _locate(axis: tuple[int, ...], x: float) -> tuple[int, int, float]:
        if x <= axis[0]:
            return 0, 0, 0.0
        if x >= axis[-1]:
            last = len(axis) - 1
            return last, last, 0.0
        hi = bisect.bisect_right(axis, x)
        lo = hi - 1
        return lo, hi, (x - axis[lo]) / (axis[hi] - axis[lo])

    def cost(self, batch: int, k_active: int) -> float:
        i0, i1, u = self._locate(self.batch_axis, batch)
        j0, j1, v = self._locate(self.k_axis, k_active)
        lat = self.latencies
        top = lat[i0, j0] * (1 - v) + lat[i0, j1] * v
        bottom = lat[i1, j0] * (1 - v) + lat[i1, j1] * v
        return float(top * (1 - u) + bottom * u)

    def overhead(self, k_active: int) -> float:
        """Batch-independent part: the line through the first two batch sizes at ``batch = 0``."""
        if len(self.batch_axis) < 2:
            return 0.0
        b0, b1 = self.batch_axis[0], self.batch_axis[1]
        c0, c1 = self.cost(b0, k_active), self.cost(b1, k_active)
        intercept = c0 - b0 * (c1 - c0) / (b1 - b0)
        return float(min(max(intercept, 0.0), c0))


CostModel = Union[PerfTable, AnalyticPerf]


def eval_cost(model: CostModel, batch: int, k_active: int) -> float:
    if batch < 1 or k_active < 1:
        raise ValidationError(f"batch and k_active must be >= 1, got ({batch}, {k_active})")
    return model.cost(batch, k_active)


def load_perf_table(path: str | PathLike) -> PerfTable:
    cells: dict[tuple[int, int], float] = {}
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["batch", "k", "latency_s"]:
            raise ValidationError(f"{path}: header must be 'batch,k,latency_s', got {reader.fieldnames}")
        for line, row in enumerate(reader, start=2):
            try:
                key = (int(row["batch"]), int(row["k"]))
                value = float(row["latency_s"])
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"{path}: line {line}: {exc}") from exc
            if key in cells:
                raise ValidationError(f"{path}: duplicate cell {key}")
            if not value > 0:
                raise ValidationError(f"{path}: latency at {key} must be > 0, got {value}")
            cells[key] = value
    if not cells:
        raise ValidationError(f"{path}: perf table is empty")
    batches = tuple(sorted({b for b, _ in cells}))
    ks = tuple(sorted({k for _, k in cells}))
    grid = np.empty((len(batches), len(ks)))
    for i, b in enumerate(batches):
        for j, k in enumerate(ks):
            if (b, k) not in cells:
                raise ValidationError(f"{path}: missing cell ({b},{k})")
            grid[i, j] = cells[(b, k)]
    return PerfTable(batches, ks, grid)


def save_perf_table(table: PerfTable, path: str | PathLike) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["batch", "k", "latency_s"])
        for i, b in enumerate(table.batch_axis):
            for j, k in enumerate(table.k_axis):
                writer.writerow([b, k, repr(float(table.latencies[i, j]))])


def load_cost_model(path: str | PathLike) -> CostModel:
    """CSV paths load as tables; JSON documents describe an analytic model."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        doc = json.loads(path.read_text())
        try:
            return AnalyticPerf(float(doc["fixed_s"]), float(doc["per_token_s"]), float(doc["per_token_per_k_s"]))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"{path}: malformed analytic perf model: {exc!r}") from exc
    return load_perf_table(path)
