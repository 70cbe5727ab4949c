"""Balanced neuron partitions shared by the solver, gating and profile code."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError


def balanced_sizes(n_items: int, n_groups: int) -> list[int]:
    """Group sizes for a balanced split; the first ``n_items % n_groups`` get one extra."""
    q, r = divmod(n_items, n_groups)
    return [q + 1 if g < r else q for g in range(n_groups)]


@dataclass(frozen=True)
class Partition:
    """Assignment of ``len(assignment)`` neurons to ``n_subexperts`` groups.

    Labels are 0-based. Group sizes must differ by at most one and no group
    may be empty.
    """

    n_subexperts: int
    assignment: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "assignment", tuple(int(a) for a in self.assignment))
        n = self.n_subexperts
        if n < 1:
            raise ValidationError(f"n_subexperts must be >= 1, got {n}")
        if len(self.assignment) < n:
            raise ValidationError(
                f"{len(self.assignment)} neurons cannot fill {n} sub-experts"
            )
        counts = [0] * n
        for idx, label in enumerate(self.assignment):
            if not 0 <= label < n:
                raise ValidationError(f"neuron {idx} has label {label} outside [0, {n})")
            counts[label] += 1
        if min(counts) == 0:
            raise ValidationError(f"empty sub-expert in partition (sizes {counts})")
        if max(counts) - min(counts) > 1:
            raise ValidationError(f"unbalanced partition (sizes {counts})")

    @classmethod
    def from_groups(cls, groups: Sequence[Iterable[int]]) -> "Partition":
        groups = [list(g) for g in groups]
        n_items = sum(len(g) for g in groups)
        assignment = [-1] * n_items
        for label, members in enumerate(groups):
            for c in members:
                if not 0 <= c < n_items or assignment[c] != -1:
                    raise ValidationError(f"groups do not form a disjoint cover (neuron {c})")
                assignment[c] = label
        return cls(len(groups), tuple(assignment))

    @classmethod
    def contiguous(cls, n_items: int, n_groups: int) -> "Partition":
        """Neurons 0..s-1 in the first group, the next block in the second, and so on."""
        assignment: list[int] = []
        for g, size in enumerate(balanced_sizes(n_items, n_groups)):
            assignment.extend([g] * size)
        return cls(n_groups, tuple(assignment))

    @property
    def n_neurons(self) -> int:
        return len(self.assignment)

    @cached_property
    def labels(self) -> np.ndarray:
        out = np.asarray(self.assignment, dtype=np.int64)
        out.flags.writeable = False
        return out

    @cached_property
    def groups(self) -> tuple[np.ndarray, ...]:
        """Member indices of each sub-expert, ascending."""
        return tuple(np.flatnonzero(self.labels == g) for g in range(self.n_subexperts))

    def sizes(self) -> list[int]:
        return [len(g) for g in self.groups]

    def canonical(self) -> "Partition":
        """Relabel groups by order of first appearance (the lexicographically smallest labeling)."""
        mapping: dict[int, int] = {}
        for a in self.assignment:
            if a not in mapping:
                mapping[a] = len(mapping)
        return Partition(self.n_subexperts, tuple(mapping[a] for a in self.assignment))

    def check_cover(self, n_neurons: int) -> None:
        if self.n_neurons != n_neurons:
            raise ValidationError(
                f"partition covers {self.n_neurons} neurons but {n_neurons} are present"
            )
