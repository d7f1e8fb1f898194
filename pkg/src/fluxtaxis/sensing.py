"""Measurement histories with provenance-keyed set semantics.

A SensorSet is the unit of information exchanged between robots: a mapping
from provenance key (robot id, iteration id) to a measurement. Union is
idempotent, commutative, and associative, which is what makes the
distributed history-fusion protocol order-free.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np


class ProvenanceConflictError(ValueError):
    """Two distinct readings claim the same provenance key (corruption)."""


@dataclass(frozen=True)
class Measurement:
    x: float
    y: float
    value: float
    robot: int
    iteration: int

    @property
    def key(self) -> tuple[int, int]:
        return (self.robot, self.iteration)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


class SensorSet:
    """Set of measurements, deduplicated on (robot id, iteration id)."""

    def __init__(self, measurements: Iterable[Measurement] = ()):
        self._by_key: dict[tuple[int, int], Measurement] = {}
        for m in measurements:
            self.add(m)

    def add(self, m: Measurement) -> None:
        existing = self._by_key.get(m.key)
        if existing is not None and existing != m:
            raise ProvenanceConflictError(
                f"provenance {m.key} carries two different readings: {existing} vs {m}"
            )
        self._by_key[m.key] = m

    def union(self, *others: "SensorSet | Iterable[Measurement]") -> "SensorSet":
        out = SensorSet(self)
        for other in others:
            for m in other:
                out.add(m)
        return out

    def __iter__(self) -> Iterator[Measurement]:
        # canonical order: by iteration, then robot; keeps every consumer
        # independent of insertion / arrival order
        return iter(sorted(self._by_key.values(), key=lambda m: (m.iteration, m.robot)))

    def __len__(self) -> int:
        return len(self._by_key)

    def __contains__(self, key: tuple[int, int]) -> bool:
        return key in self._by_key

    def __eq__(self, other) -> bool:
        return isinstance(other, SensorSet) and self._by_key == other._by_key

    def keys(self) -> set[tuple[int, int]]:
        return set(self._by_key)

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Positions (n, 2) and readings (n,) in canonical order."""
        if not self._by_key:
            return np.zeros((0, 2)), np.zeros(0)
        ms = list(self)
        pos = np.array([[m.x, m.y] for m in ms])
        val = np.array([m.value for m in ms])
        return pos, val

    def __repr__(self) -> str:
        return f"SensorSet({len(self)} measurements)"
