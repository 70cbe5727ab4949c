"""Training-free proxy gate built from co-activation centroids."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .partition import Partition
from .profile import ActivationMatrix, CoActivationMatrix
from .solver import subexpert_norms

DEFAULT_GATE_NEURONS = 4
DEFAULT_ACTIVE_FRACTION = 0.75


@dataclass(frozen=True)
class GateSet:
    """Gate neurons (global column indices, ascending) for each sub-expert."""

    r: int
    gate_neurons: tuple[tuple[int, ...], ...]

    @property
    def n_subexperts(self) -> int:
        return len(self.gate_neurons)

    def check_against(self, p: Partition) -> None:
        if self.n_subexperts != p.n_subexperts:
            raise ValidationError(
                f"gate set has {self.n_subexperts} sub-experts, partition has {p.n_subexperts}"
            )
        for n, gates in enumerate(self.gate_neurons):
            if len(gates) != min(self.r, len(p.groups[n])):
                raise ValidationError(f"sub-expert {n} has {len(gates)} gate neurons")
            for g in gates:
                if not 0 <= g < p.n_neurons or p.assignment[g] != n:
                    raise ValidationError(f"gate neuron {g} does not belong to sub-expert {n}")

    def to_doc(self, expert_id: int | str = 0) -> dict:
        return {"expert_id": expert_id, "r": self.r, "gates": [list(g) for g in self.gate_neurons]}

    @classmethod
    def from_doc(cls, doc: dict) -> "GateSet":
        try:
            return cls(int(doc["r"]), tuple(tuple(int(i) for i in g) for g in doc["gates"]))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed gate document: {exc!r}") from exc


def default_k_a(n_neurons: int) -> int:
    return max(1, round(DEFAULT_ACTIVE_FRACTION * n_neurons))


def centrality_scores(c_co: CoActivationMatrix, members: Sequence[int]) -> dict[int, int]:
    """Co-activation of each member with the other members (diagonal excluded)."""
    idx = np.asarray(list(members), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= c_co.dim):
        raise ValidationError(f"member index outside [0, {c_co.dim})")
    block = c_co.data[np.ix_(idx, idx)]
    scores = block.sum(axis=1) - np.diag(block)
    return {int(i): int(s) for i, s in zip(idx, scores)}


def select_gate_neurons(c_co: CoActivationMatrix, p: Partition, r: int = DEFAULT_GATE_NEURONS) -> GateSet:
    if r < 1:
        raise ValidationError(f"r must be >= 1, got {r}")
    p.check_cover(c_co.dim)
    chosen = []
    for members in p.groups:
        scores = centrality_scores(c_co, members)
        ranked = sorted(scores, key=lambda i: (-scores[i], i))
        chosen.append(tuple(sorted(ranked[:r])))
    return GateSet(r, tuple(chosen))


def proxy_scores(token_activations: np.ndarray, gates: GateSet) -> np.ndarray:
    """Mean gate-neuron magnitude per sub-expert.

    Accepts one token (length-C vector) or a batch (B x C); the output has
    the matching leading shape with ``N`` trailing scores.
    """
    acts = np.abs(np.asarray(token_activations, dtype=np.float64))
    return np.stack([acts[..., list(g)].sum(axis=-1) / len(g) for g in gates.gate_neurons], axis=-1)


def _topk(scores: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the ``k`` largest scores per row; ties to the lower index."""
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def select_topk_subexperts(scores: np.ndarray, k_active: int) -> list[int]:
    scores = np.asarray(scores, dtype=np.float64)
    if not 1 <= k_active <= scores.shape[-1]:
        raise ValidationError(f"k_active must be in [1, {scores.shape[-1]}], got {k_active}")
    return sorted(int(i) for i in _topk(scores, k_active))


def gating_fidelity(m: ActivationMatrix, p: Partition, gates: GateSet, k_active: int) -> float:
    """Mean over tokens of the overlap between proxy and true-norm top-k, divided by k."""
    gates.check_against(p)
    if not 1 <= k_active <= p.n_subexperts:
        raise ValidationError(f"k_active must be in [1, {p.n_subexperts}], got {k_active}")
    truth = _topk(subexpert_norms(m, p), k_active)
    proxy = _topk(proxy_scores(m.data, gates), k_active)
    hits = 0
    for t_row, p_row in zip(truth, proxy):
        hits += len(set(t_row.tolist()) & set(p_row.tolist()))
    return hits / (k_active * m.rows)
