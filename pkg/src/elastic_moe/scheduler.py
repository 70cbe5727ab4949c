"""Discrete-event simulation of quality-constrained batch scheduling.

Three policies share one event loop with a single batch in flight:

* ``prism`` keeps one virtual queue per quality level ``m``; a request with
  floor ``k_min`` waits in every queue ``m >= k_min``. When the engine is idle
  it launches the queue whose candidate batch has the best tokens-per-second,
  subject to timeout and batch-full triggers.
* ``fifo`` launches the oldest pending requests (up to ``b_max``) whenever idle.
* ``fullbatch`` waits for ``b_max`` pending requests (or the end of the
  workload) before launching.

Both baselines run a batch at the highest floor it contains.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError
from .perfmodel import CostModel, eval_cost

POLICIES = ("prism", "fifo", "fullbatch")
TRIGGERS = ("utility", "batch_full", "timeout", "none")


@dataclass(frozen=True)
class Request:
    id: int
    arrival_s: float
    prompt_tokens: int
    output_tokens: int
    k_min: int

    def __post_init__(self):
        if self.prompt_tokens < 1 or self.output_tokens < 1:
            raise ValidationError(f"request {self.id}: token counts must be >= 1")
        if self.k_min < 1:
            raise ValidationError(f"request {self.id}: k_min must be >= 1")

    @property
    def tokens(self) -> int:
        return self.prompt_tokens + self.output_tokens


# ---------------------------------------------------------------------------
# workload generation


@dataclass(frozen=True)
class TokenDist:
    """``constant`` (value), ``uniform-int`` (low..high inclusive) or ``geometric`` (mean, support >= 1)."""

    kind: str
    value: int = 0
    low: int = 0
    high: int = 0
    mean: float = 0.0

    def __post_init__(self):
        if self.kind == "constant":
            ok = self.value >= 1
        elif self.kind == "uniform-int":
            ok = 1 <= self.low <= self.high
        elif self.kind == "geometric":
            ok = self.mean >= 1.0
        else:
            raise ValidationError(f"unknown token distribution {self.kind!r}")
        if not ok:
            raise ValidationError(f"invalid parameters for {self.kind} distribution: {self}")

    @classmethod
    def from_doc(cls, doc) -> "TokenDist":
        if isinstance(doc, (int, float)):
            return cls("constant", value=int(doc))
        kind = doc.get("dist", doc.get("kind"))
        if kind == "constant":
            return cls(kind, value=int(doc["value"]))
        if kind == "uniform-int":
            return cls(kind, low=int(doc["low"]), high=int(doc["high"]))
        if kind == "geometric":
            mean = float(doc["mean"]) if "mean" in doc else 1.0 / float(doc["p"])
            return cls(kind, mean=mean)
        raise ValidationError(f"unknown token distribution {kind!r}")

    def to_doc(self) -> dict:
        if self.kind == "constant":
            return {"dist": self.kind, "value": self.value}
        if self.kind == "uniform-int":
            return {"dist": self.kind, "low": self.low, "high": self.high}
        return {"dist": self.kind, "mean": self.mean}

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "constant":
            return np.full(n, self.value, dtype=np.int64)
        if self.kind == "uniform-int":
            return rng.integers(self.low, self.high + 1, n)
        return rng.geometric(1.0 / self.mean, n).astype(np.int64)


@dataclass(frozen=True)
class WorkloadSpec:
    duration_s: float
    rate_per_s: float
    kmin_pmf: dict[int, float]
    prompt_tokens: TokenDist = TokenDist("constant", value=128)
    output_tokens: TokenDist = TokenDist("constant", value=128)
    seed: int = 0

    def __post_init__(self):
        if not self.duration_s > 0:
            raise ValidationError(f"duration_s must be > 0, got {self.duration_s}")
        if not self.rate_per_s > 0:
            raise ValidationError(f"rate_per_s must be > 0, got {self.rate_per_s}")
        pmf = {int(k): float(p) for k, p in self.kmin_pmf.items()}
        if not pmf or min(pmf) < 1 or any(p < 0 for p in pmf.values()):
            raise ValidationError("k_min pmf needs levels >= 1 with non-negative mass")
        if abs(sum(pmf.values()) - 1.0) > 1e-9:
            raise ValidationError(f"k_min pmf sums to {sum(pmf.values())}, expected 1")
        object.__setattr__(self, "kmin_pmf", dict(sorted(pmf.items())))

    @classmethod
    def from_doc(cls, doc: dict) -> "WorkloadSpec":
        try:
            return cls(
                duration_s=float(doc["duration_s"]),
                rate_per_s=float(doc["rate_per_s"]),
                kmin_pmf={int(k): float(p) for k, p in doc["kmin_pmf"].items()},
                prompt_tokens=TokenDist.from_doc(doc.get("prompt_tokens", 128)),
                output_tokens=TokenDist.from_doc(doc.get("output_tokens", 128)),
                seed=int(doc.get("seed", 0)),
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise ValidationError(f"malformed workload spec: {exc!r}") from exc

    def to_doc(self) -> dict:
        return {
            "duration_s": self.duration_s,
            "rate_per_s": self.rate_per_s,
            "kmin_pmf": {str(k): p for k, p in self.kmin_pmf.items()},
            "prompt_tokens": self.prompt_tokens.to_doc(),
            "output_tokens": self.output_tokens.to_doc(),
            "seed": self.seed,
        }


def generate_workload(spec: WorkloadSpec) -> list[Request]:
    """Poisson arrivals on ``[0, duration_s)`` with sampled floors and token counts."""
    rng = np.random.default_rng(spec.seed)
    arrivals: list[float] = []
    t = 0.0
    block = max(16, int(spec.rate_per_s * spec.duration_s * 1.1) + 16)
    while True:
        gaps = rng.exponential(1.0 / spec.rate_per_s, block)
        times = t + np.cumsum(gaps)
        inside = times[times < spec.duration_s]
        arrivals.extend(inside.tolist())
        if len(inside) < block:
            break
        t = float(times[-1])
    n = len(arrivals)
    levels = np.fromiter(spec.kmin_pmf.keys(), dtype=np.int64)
    probs = np.fromiter(spec.kmin_pmf.values(), dtype=np.float64)
    k_min = rng.choice(levels, size=n, p=probs / probs.sum())
    prompts = spec.prompt_tokens.sample(rng, n)
    outputs = spec.output_tokens.sample(rng, n)
    return [
        Request(i, arrivals[i], int(prompts[i]), int(outputs[i]), int(k_min[i]))
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# virtual queues


class VirtualQueues:
    """One arrival-ordered queue per quality level ``1..m_max``."""

    def __init__(self, m_max: int):
        if m_max < 1:
            raise ValidationError(f"m_max must be >= 1, got {m_max}")
        self.m_max = m_max
        self.queues: dict[int, dict[int, Request]] = {m: {} for m in range(1, m_max + 1)}
        self.pending: dict[int, Request] = {}
        self._last_arrival = -math.inf

    def __len__(self) -> int:
        return len(self.pending)

    def levels_of(self, request_id: int) -> list[int]:
        return [m for m, q in self.queues.items() if request_id in q]

    def candidate(self, m: int, b_max: int) -> list[Request]:
        """The oldest ``min(|Q_m|, b_max)`` requests of level ``m``."""
        return list(itertools.islice(self.queues[m].values(), b_max))

    def oldest(self, m: int) -> Request | None:
        return next(iter(self.queues[m].values()), None)


def enqueue(q: VirtualQueues, r: Request) -> None:
    if not 1 <= r.k_min <= q.m_max:
        raise ValidationError(f"request {r.id}: k_min {r.k_min} outside [1, {q.m_max}]")
    if r.id in q.pending:
        raise ValidationError(f"request {r.id} is already queued")
    if r.arrival_s < q._last_arrival:
        raise ValidationError(f"request {r.id} arrives before an already-queued request")
    q._last_arrival = r.arrival_s
    q.pending[r.id] = r
    for m in range(r.k_min, q.m_max + 1):
        q.queues[m][r.id] = r


@dataclass(frozen=True)
class BatchDecision:
    level: int
    request_ids: tuple[int, ...]
    predicted_latency_s: float
    trigger: str


def apply_dispatch(q: VirtualQueues, d: BatchDecision) -> None:
    """Remove the dispatched requests from every queue that holds them."""
    missing = [rid for rid in d.request_ids if rid not in q.pending]
    if missing:
        raise ValidationError(f"requests {missing} are not pending")
    if len(set(d.request_ids)) != len(d.request_ids):
        raise ValidationError("batch lists a request twice")
    for rid in d.request_ids:
        r = q.pending.pop(rid)
        for m in range(r.k_min, q.m_max + 1):
            del q.queues[m][rid]


def compute_utilities(q: VirtualQueues, perf: CostModel, b_max: int) -> dict[int, float]:
    """Tokens per second of each level's candidate batch if launched now; 0 when empty."""
    out = {}
    for m in range(1, q.m_max + 1):
        batch = q.candidate(m, b_max)
        if batch:
            out[m] = sum(r.tokens for r in batch) / eval_cost(perf, len(batch), m)
        else:
            out[m] = 0.0
    return out


@dataclass(frozen=True)
class SchedulerConfig:
    m_max: int = 32
    b_max: int = 256
    t_max_s: float = 0.5
    policy: str = "prism"

    def __post_init__(self):
        if self.m_max < 1:
            raise ValidationError(f"m_max must be >= 1, got {self.m_max}")
        if self.b_max < 1:
            raise ValidationError(f"b_max must be >= 1, got {self.b_max}")
        if not self.t_max_s > 0:
            raise ValidationError(f"t_max_s must be > 0, got {self.t_max_s}")
        if self.policy not in POLICIES:
            raise ValidationError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")


def _best(levels: Iterable[int], utilities: dict[int, float]) -> int:
    # highest utility, lower level on ties
    return min(levels, key=lambda m: (-utilities[m], m))


def select_dispatch(q: VirtualQueues, perf: CostModel, cfg: SchedulerConfig, now_s: float) -> BatchDecision | None:
    """Pick the next prism batch: timeout, then batch-full, then best utility."""
    nonempty = [m for m in range(1, q.m_max + 1) if q.queues[m]]
    if not nonempty:
        return None
    utilities = compute_utilities(q, perf, cfg.b_max)

    overdue = [m for m in nonempty if now_s - q.oldest(m).arrival_s > cfg.t_max_s]
    full = [m for m in nonempty if len(q.queues[m]) >= cfg.b_max]
    if overdue:
        level, trigger = _best(overdue, utilities), "timeout"
    elif full:
        level, trigger = _best(full, utilities), "batch_full"
    else:
        level, trigger = _best(nonempty, utilities), "utility"

    batch = q.candidate(level, cfg.b_max)
    return BatchDecision(
        level,
        tuple(r.id for r in batch),
        eval_cost(perf, len(batch), level),
        trigger,
    )


# ---------------------------------------------------------------------------
# simulation


@dataclass(frozen=True)
class RequestRecord:
    id: int
    arrival_s: float
    dispatch_s: float
    first_token_s: float
    complete_s: float
    k_min: int
    served_m: int
    trigger: str
    prompt_tokens: int
    output_tokens: int
    batch_index: int

    @property
    def ttft_s(self) -> float:
        return self.first_token_s - self.arrival_s

    @property
    def tpot_s(self) -> float:
        return (self.complete_s - self.first_token_s) / self.output_tokens

    @property
    def e2e_s(self) -> float:
        return self.complete_s - self.arrival_s


RECORD_COLUMNS = (
    "id", "arrival_s", "dispatch_s", "first_token_s", "complete_s",
    "k_min", "served_m", "trigger", "prompt_tokens", "output_tokens", "batch_index",
)


@dataclass
class SimReport:
    policy: str
    config: dict
    records: list[RequestRecord]
    batch_latencies: list[float] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)

    def to_summary(self) -> dict:
        return {"kind": "serve", "policy": self.policy, "config": self.config, "aggregates": self.aggregates}

    def records_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(RECORD_COLUMNS)
        for rec in self.records:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(rec, c) for c in RECORD_COLUMNS)])
        return buf.getvalue()

    def write(self, out_dir: str | PathLike) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(json.dumps(self.to_summary(), indent=2, sort_keys=True) + "\n")
        (out / "requests.csv").write_text(self.records_csv())


def _percentile(values: Sequence[float], q: float) -> float:
    return float(np.percentile(values, q)) if len(values) else 0.0


def _aggregate(records: list[RequestRecord], batch_latencies: list[float], triggers: Counter) -> dict:
    if not records:
        return {"n_requests": 0, "n_batches": 0}
    first_arrival = min(r.arrival_s for r in records)
    last_complete = max(r.complete_s for r in records)
    makespan = last_complete - first_arrival
    tokens = sum(r.prompt_tokens + r.output_tokens for r in records)
    ttft = [r.ttft_s for r in records]
    tpot = [r.tpot_s for r in records]
    e2e = [r.e2e_s for r in records]
    return {
        "n_requests": len(records),
        "n_batches": len(batch_latencies),
        "makespan_s": makespan,
        "throughput_req_s": len(records) / makespan if makespan > 0 else 0.0,
        "throughput_tokens_s": tokens / makespan if makespan > 0 else 0.0,
        "ttft_mean_s": float(np.mean(ttft)),
        "ttft_p99_s": _percentile(ttft, 99),
        "tpot_mean_s": float(np.mean(tpot)),
        "tpot_p99_s": _percentile(tpot, 99),
        "e2e_mean_s": float(np.mean(e2e)),
        "e2e_p99_s": _percentile(e2e, 99),
        "mean_served_m": float(np.mean([r.served_m for r in records])),
        "mean_batch_size": len(records) / len(batch_latencies),
        "max_batch_latency_s": max(batch_latencies),
        "slo_violations": sum(r.served_m < r.k_min for r in records),
        "triggers": {t: triggers.get(t, 0) for t in TRIGGERS},
    }


class _BaselineQueue:
    """Arrival-ordered pending list for the fifo and fullbatch policies."""

    def __init__(self):
        self.pending: deque[Request] = deque()

    def __len__(self):
        return len(self.pending)

    def add(self, r: Request):
        self.pending.append(r)

    def decide(self, perf: CostModel, cfg: SchedulerConfig, exhausted: bool) -> BatchDecision | None:
        if not self.pending:
            return None
        if cfg.policy == "fullbatch" and len(self.pending) < cfg.b_max and not exhausted:
            return None
        n = min(len(self.pending), cfg.b_max)
        batch = [self.pending.popleft() for _ in range(n)]
        level = max(r.k_min for r in batch)
        trigger = "batch_full" if cfg.policy == "fullbatch" and n == cfg.b_max else "none"
        return BatchDecision(level, tuple(r.id for r in batch), eval_cost(perf, n, level), trigger)


def run_simulation(workload: Sequence[Request], cfg: SchedulerConfig, perf: CostModel) -> SimReport:
    """Replay ``workload`` through one policy and collect per-request timings.

    Arrivals that coincide with a batch completion are admitted before the
    next decision. A batch of latency ``L`` at level ``m`` starts emitting
    tokens after the model's fixed overhead plus the batch's prompt share of
    the remaining time; every member completes at ``dispatch + L``.
    """
    for a, b in zip(workload, workload[1:]):
        if b.arrival_s < a.arrival_s:
            raise ValidationError("workload must be sorted by arrival time")
    for r in workload:
        if r.k_min > cfg.m_max:
            raise ValidationError(f"request {r.id}: k_min {r.k_min} exceeds m_max {cfg.m_max}")
    by_id = {r.id: r for r in workload}
    if len(by_id) != len(workload):
        raise ValidationError("workload has duplicate request ids")

    prism = cfg.policy == "prism"
    queues = VirtualQueues(cfg.m_max) if prism else _BaselineQueue()
    records: list[RequestRecord] = []
    batch_latencies: list[float] = []
    triggers: Counter = Counter()

    now = 0.0
    i = 0
    n = len(workload)
    while True:
        while i < n and workload[i].arrival_s <= now:
            if prism:
                enqueue(queues, workload[i])
            else:
                queues.add(workload[i])
            i += 1

        if prism:
            decision = select_dispatch(queues, perf, cfg, now)
            if decision is not None:
                apply_dispatch(queues, decision)
        else:
            decision = queues.decide(perf, cfg, exhausted=i == n)

        if decision is None:
            if i < n:
                now = max(now, workload[i].arrival_s)
                continue
            break

        latency = decision.predicted_latency_s
        batch = [by_id[rid] for rid in decision.request_ids]
        overhead = min(perf.overhead(decision.level), latency)
        prompt_share = sum(r.prompt_tokens for r in batch) / sum(r.tokens for r in batch)
        first_token = now + overhead + prompt_share * (latency - overhead)
        complete = now + latency
        for r in batch:
            records.append(
                RequestRecord(
                    r.id, r.arrival_s, now, first_token, complete, r.k_min,
                    decision.level, decision.trigger, r.prompt_tokens, r.output_tokens,
                    len(batch_latencies),
                )
            )
        batch_latencies.append(latency)
        triggers[decision.trigger] += 1
        now = complete

    records.sort(key=lambda rec: rec.id)
    config = {"m_max": cfg.m_max, "b_max": cfg.b_max, "t_max_s": cfg.t_max_s, "policy": cfg.policy}
    return SimReport(cfg.policy, config, records, batch_latencies, _aggregate(records, batch_latencies, triggers))


def fifo_capacity_req_s(perf: CostModel, b_max: int, level: int) -> float:
    """Requests per second a saturated engine serves with full batches at ``level``."""
    return b_max / eval_cost(perf, b_max, level)
