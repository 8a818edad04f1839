"""Proportional prioritized replay over a sum tree."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np


@dataclass
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool
    logp_mu: float
    priority: float | None = None
    actor_h: np.ndarray | None = None  # recurrent state before this step
    actor_c: np.ndarray | None = None
    episode: tuple[int, int] = (0, 0)  # (broker id, episode number)
    t: int = 0  # step index inside the episode
    service_id: str = ""
    version: int = 0  # policy snapshot that produced the action
    violation: bool = False


class SumTree:
    """Binary tree whose leaves hold ``p ** nu`` and internal nodes their sums."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        size = 1
        while size < capacity:
            size *= 2
        self.leaf0 = size
        self.tree = np.zeros(2 * size)

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def leaf(self, i: int) -> float:
        return float(self.tree[self.leaf0 + i])

    def leaves(self) -> np.ndarray:
        return self.tree[self.leaf0:self.leaf0 + self.capacity]

    def set(self, i: int, value: float) -> None:
        j = self.leaf0 + i
        self.tree[j] = value
        j //= 2
        while j >= 1:
            self.tree[j] = self.tree[2 * j] + self.tree[2 * j + 1]
            j //= 2

    def find(self, u: float) -> int:
        """Leaf index whose cumulative interval contains ``u`` in ``[0, total)``."""
        j = 1
        while j < self.leaf0:
            left = self.tree[2 * j]
            if u < left:
                j = 2 * j
            else:
                u -= left
                j = 2 * j + 1
        return j - self.leaf0


@dataclass
class SampleBatch:
    transitions: list[Transition]
    indices: np.ndarray
    weights: np.ndarray
    probs: np.ndarray


class PriorityBuffer:
    """FIFO-evicting replay with proportional sampling.

    ``nu`` is the prioritization exponent (0 = uniform), ``iota`` the
    importance-weight exponent, ``eps`` the priority floor.
    """

    def __init__(self, capacity: int = 10_000, nu: float = 0.6, iota: float = 0.4,
                 eps: float = 0.01, seed: int = 0, normalize_weights: bool = True):
        self.capacity = capacity
        self.nu = nu
        self.iota = iota
        self.eps = eps
        self.normalize_weights = normalize_weights
        self.tree = SumTree(capacity)
        self.priorities = np.zeros(capacity)
        self.data: list[Transition | None] = [None] * capacity
        self.slot_of: dict[tuple[tuple[int, int], int], int] = {}
        self.next_slot = 0
        self.count = 0
        self.max_priority = 1.0
        self.skipped_updates = 0
        self.generation = np.zeros(capacity, dtype=np.int64)
        self.rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return self.count

    def priority_of(self, psi: float) -> float:
        return abs(float(psi)) + self.eps

    def ready(self, batch_size: int) -> bool:
        return self.count >= batch_size

    def store(self, tr: Transition) -> int:
        slot = self.next_slot
        old = self.data[slot]
        if old is not None:
            self.slot_of.pop((old.episode, old.t), None)
        p = self.max_priority if tr.priority is None else max(float(tr.priority), self.eps)
        tr.priority = p
        self.data[slot] = tr
        self.priorities[slot] = p
        self.generation[slot] += 1
        self.tree.set(slot, p ** self.nu)
        self.slot_of[(tr.episode, tr.t)] = slot
        self.max_priority = max(self.max_priority, p)
        self.next_slot = (slot + 1) % self.capacity
        self.count = min(self.count + 1, self.capacity)
        return slot

    def extend(self, transitions: Sequence[Transition]) -> None:
        for tr in transitions:
            self.store(tr)

    def probabilities(self) -> np.ndarray:
        return self.tree.leaves() / self.tree.total

    def sample(self, batch_size: int) -> SampleBatch | None:
        """Independent draws with P_j = p_j^nu / sum_k p_k^nu; ``None`` when underfilled."""
        if not self.ready(batch_size):
            return None
        total = self.tree.total
        idx = np.empty(batch_size, dtype=np.int64)
        for n, u in enumerate(self.rng.random(batch_size) * total):
            i = self.tree.find(u)
            # guard against float round-off landing on an empty leaf
            while self.data[i] is None or self.tree.leaf(i) == 0.0:
                i = (i - 1) % self.capacity
            idx[n] = i
        probs = np.array([self.tree.leaf(i) for i in idx]) / total
        w = (1.0 / (self.count * probs)) ** self.iota
        if self.normalize_weights:
            w = w / w.max()
        return SampleBatch([self.data[i] for i in idx], idx, w, probs)

    def update_priorities(self, indices: Sequence[int], psi: Sequence[float],
                          generations: Sequence[int] | None = None) -> None:
        """Set priorities to ``|psi| + eps``; slots overwritten since sampling are skipped."""
        for n, (i, d) in enumerate(zip(indices, psi)):
            i = int(i)
            if self.data[i] is None or (generations is not None and self.generation[i] != generations[n]):
                self.skipped_updates += 1
                continue
            p = self.priority_of(d)
            self.priorities[i] = p
            self.data[i].priority = p
            self.tree.set(i, p ** self.nu)
            self.max_priority = max(self.max_priority, p)

    def lookup(self, episode: tuple[int, int], t: int) -> int | None:
        return self.slot_of.get((episode, t))

    def stats(self) -> dict[str, Any]:
        n = self.count
        return {"buffer_size": n, "max_priority": self.max_priority,
                "mean_priority": float(self.priorities[:n].mean()) if n else 0.0}
