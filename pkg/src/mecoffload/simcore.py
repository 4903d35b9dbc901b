"""Device-side task generation and local queue timing.

Every mobile device owns two serial FIFO queues: a computation queue served
at ``f_device / rho`` bits per slot and a transmission queue served at
``f_tran`` bits per slot towards the chosen edge node.  Because both are
strictly serial and the next task starts only at the beginning of the slot
after its predecessor left, finish slots have closed forms and are computed
at enqueue time.

Slots are 1-based integers within an episode.  Sizes are in bits and
capacities in cycles (or bits) per slot.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Union

import numpy as np

# Absolute slack (bits) when deciding whether a task has been fully served.
COMPLETION_TOL_BITS = 1e-6

MBIT = 1e6
GIGA = 1e9


def cycles_per_slot(ghz: float, slot_duration_s: float) -> float:
    return ghz * GIGA * slot_duration_s


def bits_per_slot(mbps: float, slot_duration_s: float) -> float:
    return mbps * MBIT * slot_duration_s


def slots_needed(size_bits: float, rate_bits_per_slot: float) -> int:
    """Smallest k >= 1 with ``k * rate >= size`` (up to the completion slack)."""
    if rate_bits_per_slot <= 0:
        raise ValueError(f"service rate must be positive, got {rate_bits_per_slot}")
    k = math.ceil((size_bits - COMPLETION_TOL_BITS) / rate_bits_per_slot)
    return max(k, 1)


@dataclass(frozen=True)
class Task:
    id: int
    device: int
    birth_slot: int
    size_bits: float
    density_cycles_per_bit: float
    deadline_slots: int

    def __post_init__(self):
        if self.id <= 0:
            raise ValueError("task id must be positive")
        if self.birth_slot < 1:
            raise ValueError("birth_slot is 1-based")
        if self.size_bits <= 0 or self.density_cycles_per_bit <= 0:
            raise ValueError("task size and density must be positive")
        if self.deadline_slots < 1:
            raise ValueError("deadline must be at least one slot")

    @property
    def deadline_slot(self) -> int:
        """Last slot in which the task may still be worked on."""
        return self.birth_slot + self.deadline_slots - 1


class ArrivalProcess:
    """Bernoulli task arrivals with sizes drawn uniformly from a finite set.

    One process per device; the caller supplies a seeded generator so that
    arrival streams are reproducible and independent of any policy.
    """

    def __init__(self, arrival_probability: float, size_choices_bits: Sequence[float],
                 rng: np.random.Generator, density_cycles_per_bit: float, deadline_slots: int,
                 id_counter: Optional[itertools.count] = None):
        if not 0.0 <= arrival_probability <= 1.0:
            raise ValueError("arrival_probability must lie in [0, 1]")
        sizes = np.asarray(size_choices_bits, dtype=float)
        if sizes.size == 0 or np.any(sizes <= 0):
            raise ValueError("size choices must be a non-empty set of positive sizes")
        self.arrival_probability = float(arrival_probability)
        self.size_choices_bits = sizes
        self.rng = rng
        self.density_cycles_per_bit = density_cycles_per_bit
        self.deadline_slots = deadline_slots
        self.ids = id_counter if id_counter is not None else itertools.count(1)


def draw_arrival(proc: ArrivalProcess, m: int, t: int) -> Optional[Task]:
    # Both draws are always consumed so the stream layout does not depend on outcomes.
    u = proc.rng.random()
    idx = int(proc.rng.integers(len(proc.size_choices_bits)))
    if u >= proc.arrival_probability:
        return None
    return Task(id=next(proc.ids), device=m, birth_slot=t,
                size_bits=float(proc.size_choices_bits[idx]),
                density_cycles_per_bit=proc.density_cycles_per_bit,
                deadline_slots=proc.deadline_slots)


@dataclass
class DeviceTimeline:
    """Finish-slot bookkeeping for one device's computation and transmission queues."""

    device_capacity_cycles_per_slot: float
    tran_capacity_bits_per_slot: Dict[int, float]
    comp_finish_slots: Dict[int, int] = field(default_factory=dict)
    tran_finish_slots: Dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.device_capacity_cycles_per_slot <= 0:
            raise ValueError("device capacity must be positive")
        if any(c <= 0 for c in self.tran_capacity_bits_per_slot.values()):
            raise ValueError("transmission capacities must be positive")

    def record_comp(self, birth_slot: int, finish: int) -> None:
        if birth_slot in self.comp_finish_slots or birth_slot in self.tran_finish_slots:
            raise ValueError(f"slot {birth_slot} already has a scheduled task")
        self.comp_finish_slots[birth_slot] = finish

    def record_tran(self, birth_slot: int, finish: int) -> None:
        if birth_slot in self.comp_finish_slots or birth_slot in self.tran_finish_slots:
            raise ValueError(f"slot {birth_slot} already has a scheduled task")
        self.tran_finish_slots[birth_slot] = finish

    def clear(self) -> None:
        self.comp_finish_slots.clear()
        self.tran_finish_slots.clear()


def _wait(finish_slots: Dict[int, int], t: int) -> int:
    last = max((l for s, l in finish_slots.items() if s < t), default=0)
    return max(last - t + 1, 0)


def comp_wait(tl: DeviceTimeline, t: int) -> int:
    """Slots a task placed in the computation queue at ``t`` waits before service."""
    return _wait(tl.comp_finish_slots, t)


def tran_wait(tl: DeviceTimeline, t: int) -> int:
    return _wait(tl.tran_finish_slots, t)


def local_rate_bits(tl: DeviceTimeline, density: float) -> float:
    return tl.device_capacity_cycles_per_slot / density


def comp_outcome(task: Task, delta: int, tl: DeviceTimeline) -> tuple[int, bool]:
    """Return ``(finish_slot, completed)`` for local processing.

    ``completed`` is False when the deadline cuts the task off.
    """
    rate = local_rate_bits(tl, task.density_cycles_per_bit)
    raw = task.birth_slot + delta + slots_needed(task.size_bits, rate) - 1
    return min(raw, task.deadline_slot), raw <= task.deadline_slot


def comp_finish(task: Task, delta: int, tl: DeviceTimeline) -> int:
    return comp_outcome(task, delta, tl)[0]


def _resolve_edge(target_edge: Union[int, Sequence[int]]) -> int:
    if isinstance(target_edge, (int, np.integer)):
        return int(target_edge)
    chosen = [n for n, y in enumerate(target_edge) if y]
    if len(chosen) != 1:
        raise ValueError(f"a task is offloaded to exactly one edge node, got selection {list(target_edge)}")
    return chosen[0]


def tran_outcome(task: Task, delta: int, target_edge: Union[int, Sequence[int]],
                 tl: DeviceTimeline) -> tuple[int, bool]:
    """Return ``(finish_slot, sent)`` for the transmission queue.

    A task whose transmission ends in its deadline slot is reported as not
    sent: the edge could only start on it in the following slot, after the
    deadline, so it is dropped at the device.
    """
    n = _resolve_edge(target_edge)
    if n not in tl.tran_capacity_bits_per_slot:
        raise ValueError(f"unknown edge node {n}")
    raw = task.birth_slot + delta + slots_needed(task.size_bits, tl.tran_capacity_bits_per_slot[n]) - 1
    return min(raw, task.deadline_slot), raw < task.deadline_slot


def tran_finish(task: Task, delta: int, target_edge: Union[int, Sequence[int]],
                tl: DeviceTimeline) -> int:
    return tran_outcome(task, delta, target_edge, tl)[0]
