"""FIFO memory bank of teacher embedding maps for inter-image losses.

One shared bank is filled with teacher predictions each iteration; both the
student's and the teacher's cross-image terms compare against the same sampled
entries. The bank is in-memory only and rebuilt every run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensors import ContractError, DomainError, EmbeddingMap, LabelMask


@dataclass
class BankEntry:
    embedding: EmbeddingMap
    mask: LabelMask
    iteration_tag: int

    def __post_init__(self):
        if (self.embedding.height, self.embedding.width) != self.mask.shape:
            raise ContractError(
                f"bank entry embedding {self.embedding.shape} and mask "
                f"{self.mask.shape} disagree on H x W"
            )


class MemoryBank:
    """Capacity-bounded FIFO queue with seeded uniform sampling.

    Single-writer: enqueue must not overlap sample. Sampling returns distinct
    entries without replacement; when fewer than the requested count are
    stored, everything is returned (in draw order).
    """

    def __init__(self, capacity: int, seed=0):
        if capacity < 1:
            raise DomainError(f"bank capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.entries: list[BankEntry] = []
        self.rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self.entries)

    def enqueue(self, batch: list[BankEntry]) -> None:
        """Append a batch in order, evicting oldest entries beyond capacity."""
        if not batch:
            raise DomainError("enqueue batch must be non-empty")
        reference = self.entries[0] if self.entries else batch[0]
        for entry in batch:
            if entry.embedding.shape != reference.embedding.shape:
                raise ContractError(
                    f"bank entry shape {entry.embedding.shape} inconsistent with "
                    f"existing {reference.embedding.shape}"
                )
        self.entries.extend(batch)
        if len(self.entries) > self.capacity:
            del self.entries[: len(self.entries) - self.capacity]
        assert len(self.entries) <= self.capacity

    def sample(self, count: int) -> list[BankEntry]:
        """Draw min(count, size) distinct entries uniformly, in draw order.

        An empty bank yields an empty list so callers can skip inter-image
        losses for that iteration.
        """
        if count < 1:
            raise DomainError(f"sample count must be >= 1, got {count}")
        if not self.entries:
            return []
        take = min(count, len(self.entries))
        chosen = self.rng.choice(len(self.entries), size=take, replace=False)
        return [self.entries[int(i)] for i in chosen]
