"""Activation matrices: file formats, synthetic generation, and a toy SwiGLU expert.

Activation matrices always hold magnitudes. Signed values are rectified on
load and on collection, since every consumer (L1 norms, top-k selection)
works on ``|A|``.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from os import PathLike
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError
from .partition import Partition

MATRIX_MAGIC = b"MPAM"
EXPERT_MAGIC = b"MPEX"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")

# log-magnitude growth per unit probability used when a single positive
# quantile leaves the tails of the synthetic distribution unconstrained
DEFAULT_LOG_SLOPE = 2.0 * math.log(10.0)


@dataclass(frozen=True)
class ActivationMatrix:
    """``rows`` calibration tokens by ``cols`` neurons of non-negative magnitudes."""

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 2:
            raise ValidationError(f"activation matrix must be 2-D, got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValidationError(f"activation matrix must be at least 1x1, got {data.shape}")
        bad = ~np.isfinite(data)
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise ValidationError(f"non-finite value at row {r}, col {c}")
        if (data < 0).any():
            r, c = np.argwhere(data < 0)[0]
            raise ValidationError(f"negative magnitude at row {r}, col {c}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def as_float64(self) -> np.ndarray:
        return self.data.astype(np.float64)


@dataclass(frozen=True)
class BinaryActivation:
    bits: np.ndarray  # uint8, rows x cols
    k_a: int

    @property
    def rows(self) -> int:
        return self.bits.shape[0]

    @property
    def cols(self) -> int:
        return self.bits.shape[1]


@dataclass(frozen=True)
class CoActivationMatrix:
    data: np.ndarray  # int64, cols x cols

    @property
    def dim(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class SynthSpec:
    rows: int
    cols: int
    quantiles: tuple[tuple[float, float], ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "quantiles", tuple((float(p), float(q)) for p, q in self.quantiles)
        )
        if self.rows < 1 or self.cols < 1:
            raise ValidationError(f"rows and cols must be >= 1, got {self.rows}x{self.cols}")
        if not self.quantiles:
            raise ValidationError("at least one quantile target is required")
        prev_p, prev_q = 0.0, 0.0
        for p, q in self.quantiles:
            if not 0.0 < p < 1.0:
                raise ValidationError(f"quantile probability {p} outside (0, 1)")
            if p <= prev_p:
                raise ValidationError("quantile probabilities must be strictly increasing")
            if not math.isfinite(q) or q < 0.0:
                raise ValidationError(f"quantile magnitude {q} must be finite and >= 0")
            if q < prev_q:
                raise ValidationError("quantile magnitudes must be non-decreasing")
            prev_p, prev_q = p, q

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthSpec":
        try:
            return cls(
                rows=int(doc["rows"]),
                cols=int(doc["cols"]),
                quantiles=tuple((p, q) for p, q in doc["quantiles"]),
                seed=int(doc.get("seed", 0)),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed synthetic spec: {exc!r}") from exc


# ---------------------------------------------------------------------------
# file formats


def save_activation_matrix(m: ActivationMatrix, path: str | PathLike, format: str = "binary") -> None:
    path = Path(path)
    if format == "binary":
        payload = np.ascontiguousarray(m.data, dtype="<f4").tobytes()
        path.write_bytes(_HEADER.pack(MATRIX_MAGIC, FORMAT_VERSION, m.rows, m.cols) + payload)
    elif format == "csv":
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for row in m.data:
                writer.writerow([repr(float(v)) for v in row])
    else:
        raise ValidationError(f"unknown matrix format {format!r}")


def _read_framed(raw: bytes, magic: bytes, what: str) -> tuple[int, int, memoryview]:
    if len(raw) < _HEADER.size:
        raise ValidationError(f"{what}: truncated header ({len(raw)} bytes)")
    got_magic, version, a, b = _HEADER.unpack_from(raw)
    if got_magic != magic:
        raise ValidationError(f"{what}: bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise ValidationError(f"{what}: unsupported version {version}")
    return a, b, memoryview(raw)[_HEADER.size:]


def _floats_from(payload: memoryview | bytes, expected: int, cols: int, what: str) -> np.ndarray:
    n_bytes = len(payload)
    if n_bytes != expected * 4:
        have = n_bytes // 4
        r, c = divmod(have, cols) if cols else (0, 0)
        raise ValidationError(
            f"{what}: header declares {expected} values ({cols} cols) but payload "
            f"holds {n_bytes} bytes; data ends at row {r}, col {c}"
        )
    return np.frombuffer(payload, dtype="<f4").astype(np.float32)


def _check_finite(values: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(values)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise ValidationError(f"{what}: non-finite value at row {r}, col {c}")


def load_activation_matrix(path: str | PathLike, format: str = "binary") -> ActivationMatrix:
    """Read an MPAM binary or headerless CSV matrix; values are stored as magnitudes."""
    path = Path(path)
    if format == "binary":
        rows, cols, payload = _read_framed(path.read_bytes(), MATRIX_MAGIC, str(path))
        if rows < 1 or cols < 1:
            raise ValidationError(f"{path}: header declares {rows}x{cols} matrix")
        values = _floats_from(payload, rows * cols, cols, str(path)).reshape(rows, cols)
    elif format == "csv":
        rows_data: list[list[float]] = []
        with path.open(newline="") as fh:
            for r, row in enumerate(csv.reader(fh)):
                if not row or all(not cell.strip() for cell in row):
                    continue
                try:
                    parsed = [float(cell) for cell in row]
                except ValueError as exc:
                    raise ValidationError(f"{path}: unparsable value in row {r}: {exc}") from exc
                if rows_data and len(parsed) != len(rows_data[0]):
                    raise ValidationError(
                        f"{path}: row {r} has {len(parsed)} values, expected {len(rows_data[0])}"
                    )
                rows_data.append(parsed)
        if not rows_data:
            raise ValidationError(f"{path}: empty matrix")
        values = np.asarray(rows_data, dtype=np.float64)
    else:
        raise ValidationError(f"unknown matrix format {format!r}")
    _check_finite(values, str(path))
    return ActivationMatrix(np.abs(values))


def guess_format(path: str | PathLike) -> str:
    return "csv" if str(path).lower().endswith(".csv") else "binary"


# ---------------------------------------------------------------------------
# synthetic activations


def _tail_knots(targets: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    """Extend the target quantiles with end points at probability 0 and 1."""
    p_first, q_first = targets[0]
    p_last, q_last = targets[-1]
    positive = [(p, q) for p, q in targets if q > 0]

    if q_first == 0.0:
        q_lo = 0.0
    else:
        if len(targets) > 1:
            (p0, q0), (p1, q1) = targets[0], targets[1]
            slope = math.log(q1 / q0) / (p1 - p0)
        else:
            slope = DEFAULT_LOG_SLOPE
        q_lo = q_first * math.exp(-slope * p_first)

    if q_last == 0.0:
        # nothing positive to scale from; unit-scale upper tail
        q_hi = 1.0
    else:
        if len(positive) > 1:
            (p0, q0), (p1, q1) = positive[-2], positive[-1]
            slope = math.log(q1 / q0) / (p1 - p0)
        else:
            slope = DEFAULT_LOG_SLOPE
        q_hi = q_last * math.exp(slope * (1.0 - p_last))

    return [(0.0, q_lo), *targets, (1.0, q_hi)]


def synthetic_quantile_function(targets: Sequence[tuple[float, float]]):
    """Piecewise log-linear inverse CDF through the target (probability, magnitude) knots.

    Segments with a zero end point are interpolated linearly instead.
    """
    knots = _tail_knots(list(targets))
    ps = np.array([p for p, _ in knots])
    qs = np.array([q for _, q in knots])

    def quantile(u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        seg = np.clip(np.searchsorted(ps, u, side="right") - 1, 0, len(ps) - 2)
        p0, p1 = ps[seg], ps[seg + 1]
        q0, q1 = qs[seg], qs[seg + 1]
        t = (u - p0) / (p1 - p0)
        linear = q0 + t * (q1 - q0)
        with np.errstate(divide="ignore", invalid="ignore"):
            loglin = q0 * np.power(np.where(q0 > 0, q1 / q0, 1.0), t)
        return np.where((q0 > 0) & (q1 > 0), loglin, linear)

    return quantile


def generate_synthetic_activations(spec: SynthSpec) -> ActivationMatrix:
    """I.i.d. magnitudes whose quantiles match ``spec.quantiles``; pure in ``spec``."""
    rng = np.random.default_rng(spec.seed)
    u = rng.random((spec.rows, spec.cols))
    values = synthetic_quantile_function(spec.quantiles)(u)
    return ActivationMatrix(values.astype(np.float32))


def quantile_summary(m: ActivationMatrix, probs: Iterable[float] = (0.25, 0.5, 0.75, 0.9, 0.99)) -> dict[str, float]:
    flat = m.data.ravel()
    return {f"{p:g}": float(np.quantile(flat, p)) for p in probs}


# ---------------------------------------------------------------------------
# toy SwiGLU expert


@dataclass(frozen=True)
class ToyExpert:
    w_gate: np.ndarray  # d_model x d_ff
    w_up: np.ndarray  # d_model x d_ff
    w_down: np.ndarray  # d_ff x d_model

    def __post_init__(self):
        ws = []
        for name in ("w_gate", "w_up", "w_down"):
            w = np.array(getattr(self, name), dtype=np.float32, copy=True)
            if w.ndim != 2:
                raise ValidationError(f"{name} must be 2-D, got shape {w.shape}")
            if not np.isfinite(w).all():
                raise ValidationError(f"{name} has non-finite weights")
            w.flags.writeable = False
            object.__setattr__(self, name, w)
            ws.append(w)
        g, u, d = ws
        if g.shape != u.shape or d.shape != (g.shape[1], g.shape[0]):
            raise ValidationError(
                f"inconsistent expert shapes: gate {g.shape}, up {u.shape}, down {d.shape}"
            )

    @property
    def d_model(self) -> int:
        return self.w_gate.shape[0]

    @property
    def d_ff(self) -> int:
        return self.w_gate.shape[1]

    @classmethod
    def random(cls, d_model: int, d_ff: int, seed: int = 0, scale: float | None = None) -> "ToyExpert":
        rng = np.random.default_rng(seed)
        s_in = scale if scale is not None else 1.0 / math.sqrt(d_model)
        s_out = scale if scale is not None else 1.0 / math.sqrt(d_ff)
        return cls(
            w_gate=rng.normal(0.0, s_in, (d_model, d_ff)),
            w_up=rng.normal(0.0, s_in, (d_model, d_ff)),
            w_down=rng.normal(0.0, s_out, (d_ff, d_model)),
        )


def save_toy_expert(expert: ToyExpert, path: str | PathLike) -> None:
    header = _HEADER.pack(EXPERT_MAGIC, FORMAT_VERSION, expert.d_model, expert.d_ff)
    body = b"".join(
        np.ascontiguousarray(w, dtype="<f4").tobytes()
        for w in (expert.w_gate, expert.w_up, expert.w_down)
    )
    Path(path).write_bytes(header + body)


def load_toy_expert(path: str | PathLike) -> ToyExpert:
    d_model, d_ff, payload = _read_framed(Path(path).read_bytes(), EXPERT_MAGIC, str(path))
    n = d_model * d_ff
    values = _floats_from(payload, 3 * n, d_ff, str(path))
    return ToyExpert(
        w_gate=values[:n].reshape(d_model, d_ff),
        w_up=values[n : 2 * n].reshape(d_model, d_ff),
        w_down=values[2 * n :].reshape(d_ff, d_model),
    )


def silu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore"):
        return x / (1.0 + np.exp(-x))


def _check_input(expert: ToyExpert, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (expert.d_model,):
        raise ValidationError(f"input has shape {x.shape}, expected ({expert.d_model},)")
    if not np.isfinite(x).all():
        raise ValidationError("input vector has non-finite entries")
    return x


def _intermediate(expert: ToyExpert, x: np.ndarray) -> np.ndarray:
    gate = x @ expert.w_gate.astype(np.float64)
    up = x @ expert.w_up.astype(np.float64)
    return silu(gate) * up


def toy_ffn_forward(expert: ToyExpert, x) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(y, a)``: the expert output and its intermediate activation vector."""
    x = _check_input(expert, x)
    a = _intermediate(expert, x)
    y = a @ expert.w_down.astype(np.float64)
    return y.astype(np.float32), a.astype(np.float32)


def partitioned_forward(expert: ToyExpert, partition: Partition, x, active: Iterable[int]) -> np.ndarray:
    """Sum of the outputs of the ``active`` sub-experts (0-based labels)."""
    partition.check_cover(expert.d_ff)
    x = _check_input(expert, x)
    active = sorted(set(int(n) for n in active))
    for n in active:
        if not 0 <= n < partition.n_subexperts:
            raise ValidationError(f"sub-expert {n} outside [0, {partition.n_subexperts})")
    a = _intermediate(expert, x)
    w_down = expert.w_down.astype(np.float64)
    y = np.zeros(expert.d_model)
    for n in active:
        members = partition.groups[n]
        y += a[members] @ w_down[members, :]
    return y.astype(np.float32)


def collect_activation_matrix(expert: ToyExpert, inputs: Sequence) -> ActivationMatrix:
    if len(inputs) == 0:
        raise ValidationError("at least one calibration input is required")
    rows = [np.abs(_intermediate(expert, _check_input(expert, x))) for x in inputs]
    return ActivationMatrix(np.vstack(rows).astype(np.float32))


def load_input_vectors(path: str | PathLike) -> list[np.ndarray]:
    """Calibration inputs: one comma-separated vector per line."""
    out = []
    with Path(path).open(newline="") as fh:
        for r, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            try:
                out.append(np.array([float(v) for v in row]))
            except ValueError as exc:
                raise ValidationError(f"{path}: unparsable value in row {r}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# binarization and co-activation


def binarize_topk(m: ActivationMatrix, k_a: int) -> BinaryActivation:
    """Mark the ``k_a`` largest magnitudes in each row; ties go to the lower column."""
    if not 1 <= k_a <= m.cols:
        raise ValidationError(f"k_a must be in [1, {m.cols}], got {k_a}")
    order = np.argsort(-m.data, axis=1, kind="stable")[:, :k_a]
    bits = np.zeros(m.data.shape, dtype=np.uint8)
    np.put_along_axis(bits, order, 1, axis=1)
    return BinaryActivation(bits, k_a)


def coactivation(bin: BinaryActivation) -> CoActivationMatrix:
    b = bin.bits.astype(np.int64)
    return CoActivationMatrix(b.T @ b)
