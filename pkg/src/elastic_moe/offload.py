"""Memory-constrained offloading: an LRU VRAM cache over expert or sub-expert units.

Per generation step the latency is the transfer time of the units missing
from VRAM plus the compute time of every required unit. Transfers and
compute are not overlapped.
"""

from __future__ import annotations

import csv
import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from fractions import Fraction
from os import PathLike
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError

GRANULARITIES = ("monolithic", "fine")


@dataclass(frozen=True)
class OffloadConfig:
    n_experts: int
    subexperts_per_expert: int
    expert_bytes: float
    vram_bytes: float
    pcie_bytes_per_s: float
    compute_s_per_subexpert: float
    granularity: str = "fine"

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ValidationError(f"granularity must be one of {GRANULARITIES}, got {self.granularity!r}")
        for name in ("n_experts", "subexperts_per_expert", "expert_bytes", "vram_bytes",
                     "pcie_bytes_per_s", "compute_s_per_subexpert"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ValidationError(f"{name} must be a positive number, got {value!r}")

    @property
    def fine(self) -> bool:
        return self.granularity == "fine"

    @property
    def unit_bytes(self) -> Fraction:
        whole = Fraction(self.expert_bytes)
        return whole / self.subexperts_per_expert if self.fine else whole

    @property
    def total_units(self) -> int:
        return self.n_experts * (self.subexperts_per_expert if self.fine else 1)

    @property
    def capacity_units(self) -> int:
        return math.floor(Fraction(self.vram_bytes) / self.unit_bytes)

    def with_granularity(self, granularity: str) -> "OffloadConfig":
        return replace(self, granularity=granularity)

    @classmethod
    def from_doc(cls, doc: dict) -> "OffloadConfig":
        try:
            return cls(
                n_experts=int(doc["n_experts"]),
                subexperts_per_expert=int(doc["subexperts_per_expert"]),
                expert_bytes=doc["expert_bytes"],
                vram_bytes=doc["vram_bytes"],
                pcie_bytes_per_s=doc["pcie_bytes_per_s"],
                compute_s_per_subexpert=doc["compute_s_per_subexpert"],
                granularity=doc.get("granularity", "fine"),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed offload config: {exc!r}") from exc

    def to_doc(self) -> dict:
        return {
            "n_experts": self.n_experts,
            "subexperts_per_expert": self.subexperts_per_expert,
            "expert_bytes": self.expert_bytes,
            "vram_bytes": self.vram_bytes,
            "pcie_bytes_per_s": self.pcie_bytes_per_s,
            "compute_s_per_subexpert": self.compute_s_per_subexpert,
            "granularity": self.granularity,
        }


def capacity_residency(cfg: OffloadConfig) -> float:
    """Fraction of all routed units that fit in the VRAM budget."""
    return min(cfg.capacity_units, cfg.total_units) / cfg.total_units


def required_units(k_equiv: float, cfg: OffloadConfig) -> int:
    """Units to load for a demand of ``k_equiv`` experts' worth of compute."""
    if not k_equiv > 0:
        raise ValidationError(f"k_equiv must be > 0, got {k_equiv}")
    demand = k_equiv * cfg.subexperts_per_expert if cfg.fine else k_equiv
    # round first so 0.7 * 10 does not become 8 units
    return math.ceil(round(demand, 9))


# ---------------------------------------------------------------------------
# routing traces


@dataclass(frozen=True)
class RoutingTrace:
    steps: tuple[tuple[int, ...], ...]
    total_units: int
    k_equiv: tuple[float, ...] = ()

    def __post_init__(self):
        for t, units in enumerate(self.steps):
            if not units:
                raise ValidationError(f"step {t} requires no units")
            if len(set(units)) != len(units):
                raise ValidationError(f"step {t} lists a unit twice")
            for u in units:
                if not 0 <= u < self.total_units:
                    raise ValidationError(f"step {t}: unit {u} outside [0, {self.total_units})")


def generate_routing_trace(
    steps: int,
    k_equiv: float | Sequence[float],
    locality: float,
    cfg: OffloadConfig,
    seed: int = 0,
) -> RoutingTrace:
    """Random per-step unit sets with tunable reuse.

    Each unit required at step ``t - 1`` is kept at step ``t`` with
    probability ``locality``; the rest of the set is filled uniformly from
    units not already chosen for step ``t``.
    """
    if steps < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    if not 0.0 <= locality <= 1.0:
        raise ValidationError(f"locality must be in [0, 1], got {locality}")
    demands = [float(k_equiv)] * steps if np.isscalar(k_equiv) else [float(k) for k in k_equiv]
    if len(demands) != steps:
        raise ValidationError(f"got {len(demands)} k_equiv values for {steps} steps")
    total = cfg.total_units
    rng = np.random.default_rng(seed)

    out: list[tuple[int, ...]] = []
    prev = np.empty(0, dtype=np.int64)
    for t, k in enumerate(demands):
        n = required_units(k, cfg)
        if n > total:
            raise ValidationError(f"step {t} needs {n} units but only {total} exist")
        keep = prev[rng.random(len(prev)) < locality]
        if len(keep) > n:
            keep = np.sort(rng.choice(keep, n, replace=False))
        pool = np.setdiff1d(np.arange(total), keep, assume_unique=True)
        fresh = rng.choice(pool, n - len(keep), replace=False)
        current = np.sort(np.concatenate([keep, fresh]).astype(np.int64))
        out.append(tuple(int(u) for u in current))
        prev = current
    return RoutingTrace(tuple(out), total, tuple(demands))


def save_trace(trace: RoutingTrace, path: str | PathLike) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "unit_id"])
        for t, units in enumerate(trace.steps):
            for u in units:
                writer.writerow([t, u])


def load_trace(path: str | PathLike, cfg: OffloadConfig) -> RoutingTrace:
    per_step: dict[int, list[int]] = {}
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["step", "unit_id"]:
            raise ValidationError(f"{path}: header must be 'step,unit_id'")
        for line, row in enumerate(reader, start=2):
            try:
                per_step.setdefault(int(row["step"]), []).append(int(row["unit_id"]))
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"{path}: line {line}: {exc}") from exc
    if not per_step:
        raise ValidationError(f"{path}: empty trace")
    if sorted(per_step) != list(range(len(per_step))):
        raise ValidationError(f"{path}: steps must be numbered 0..T-1 without gaps")
    return RoutingTrace(tuple(tuple(sorted(per_step[t])) for t in range(len(per_step))), cfg.total_units)


# ---------------------------------------------------------------------------
# cache simulation


class CacheState:
    """Resident units in recency order (least recent first)."""

    def __init__(self, capacity_units: int):
        if capacity_units < 1:
            raise ValidationError(f"cache must hold at least one unit, got {capacity_units}")
        self.capacity_units = capacity_units
        self.lru: OrderedDict[int, None] = OrderedDict()

    @property
    def resident(self) -> set[int]:
        return set(self.lru)

    @property
    def lru_order(self) -> list[int]:
        return list(self.lru)

    def __len__(self) -> int:
        return len(self.lru)


@dataclass(frozen=True)
class StepLatency:
    io_s: float
    compute_s: float
    total_s: float
    miss_count: int
    evicted: tuple[int, ...] = ()


def cache_step(cache: CacheState, s_req: Iterable[int], cfg: OffloadConfig) -> tuple[StepLatency, CacheState]:
    """Serve one generation step, updating ``cache`` in place.

    Misses are loaded after evicting least-recently-used units that this step
    does not need. Afterwards every required unit is most recent, in
    ascending id order.
    """
    wanted = sorted(set(int(u) for u in s_req))
    if len(wanted) > cache.capacity_units:
        raise ValidationError(f"step needs {len(wanted)} units but the cache holds {cache.capacity_units}")
    lru = cache.lru
    misses = [u for u in wanted if u not in lru]
    for u in wanted:
        if u in lru:
            lru.move_to_end(u)
    # required hits now sit at the recent end, so the front is safe to evict
    evicted = []
    while len(lru) + len(misses) > cache.capacity_units:
        victim, _ = lru.popitem(last=False)
        evicted.append(victim)
    for u in wanted:
        lru[u] = None
        lru.move_to_end(u)

    io_s = float(len(misses) * cfg.unit_bytes / Fraction(cfg.pcie_bytes_per_s))
    per_unit = cfg.compute_s_per_subexpert * (1 if cfg.fine else cfg.subexperts_per_expert)
    compute_s = len(wanted) * per_unit
    return StepLatency(io_s, compute_s, io_s + compute_s, len(misses), tuple(evicted)), cache


@dataclass
class OffloadReport:
    granularity: str
    steps: list[StepLatency] = field(default_factory=list)
    requested: int = 0
    misses: int = 0

    @property
    def total_s(self) -> float:
        return math.fsum(s.total_s for s in self.steps)

    @property
    def hit_ratio(self) -> float:
        return 1.0 - self.misses / self.requested if self.requested else 0.0

    def to_doc(self, cfg: OffloadConfig | None = None) -> dict:
        doc = {
            "kind": "offload",
            "granularity": self.granularity,
            "n_steps": len(self.steps),
            "total_latency_s": self.total_s,
            "io_s": math.fsum(s.io_s for s in self.steps),
            "compute_s": math.fsum(s.compute_s for s in self.steps),
            "hit_ratio": self.hit_ratio,
            "misses": self.misses,
            "requested": self.requested,
            "step_latency_s": [s.total_s for s in self.steps],
        }
        if cfg is not None:
            doc["config"] = cfg.to_doc()
            doc["capacity_residency"] = capacity_residency(cfg)
        return doc


def run_offload_sim(trace: RoutingTrace, cfg: OffloadConfig) -> OffloadReport:
    """Replay ``trace`` from a cold cache."""
    if trace.total_units != cfg.total_units:
        raise ValidationError(
            f"trace addresses {trace.total_units} units but {cfg.granularity} config has {cfg.total_units}"
        )
    cache = CacheState(cfg.capacity_units)
    report = OffloadReport(cfg.granularity)
    for units in trace.steps:
        latency, cache = cache_step(cache, units, cfg)
        report.steps.append(latency)
        report.requested += len(units)
        report.misses += latency.miss_count
    return report
