"""Device-side acting and trainer-side learning for the offloading policy.

A :class:`DeviceAgent` runs on each mobile device: on every task arrival it
asks its trainer for the current evaluation network, picks an action
epsilon-greedily (minimum Q-value, since Q estimates cost), and once a task
has been processed or dropped it uploads the experience.  A
:class:`Trainer` lives on the edge node assigned to that device; it keeps a
replay memory plus evaluation and target networks, and performs one double-DQN
update per uploaded experience.  The two sides talk only through the message
types in :mod:`mecoffload.messages`.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .env import ActionChoice, CostEvent, Observation
from .neural import NetParams, NetShape, backward, copy_into, forward, make_optimizer, q_values


@dataclass(frozen=True)
class Normalizer:
    max_size_bits: float
    deadline_slots: int
    n_devices: int

    @classmethod
    def from_config(cls, cfg) -> "Normalizer":
        return cls(float(np.max(cfg.sizes_bits)), cfg.deadline_slots, cfg.M)

    def scalars(self, obs: Observation) -> np.ndarray:
        out = np.empty(3 + len(obs.edge_queue_bits))
        out[0] = obs.task_size_bits / self.max_size_bits
        out[1] = obs.comp_wait_slots / self.deadline_slots
        out[2] = obs.tran_wait_slots / self.deadline_slots
        out[3:] = obs.edge_queue_bits / self.max_size_bits
        return out

    def history(self, obs: Observation) -> np.ndarray:
        return obs.load_history / self.n_devices

    def encode(self, obs: Observation) -> Tuple[np.ndarray, np.ndarray]:
        return self.scalars(obs), self.history(obs)


def argmin_lowest(q: np.ndarray) -> int:
    """Index of the smallest entry, lowest index on ties."""
    return int(np.argmin(q))


def select_action(params: NetParams, obs: Observation, epsilon: float, rng: np.random.Generator,
                  normalizer: Normalizer) -> ActionChoice:
    n_edges = params.shape.n_edges
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if rng.random() < epsilon:
        return ActionChoice.from_index(int(rng.integers(n_edges + 1)), n_edges)
    sc, hist = normalizer.encode(obs)
    q = q_values(params, sc, hist)[0]
    return ActionChoice.from_index(argmin_lowest(q), n_edges)


def epsilon_schedule(episode: int, total_episodes: int, start: float = 1.0, end: float = 0.01) -> float:
    if not 1 <= episode <= max(total_episodes, 1):
        raise ValueError(f"episode {episode} outside 1..{total_episodes}")
    if total_episodes <= 1:
        return start
    frac = (episode - 1) / (total_episodes - 1)
    return max(start + frac * (end - start), end)


# experience / replay ------------------------------------------------------------------

@dataclass
class Experience:
    state: Observation
    action: ActionChoice
    cost: float
    next_state: Observation
    terminal: bool = False
    device: int = 0
    episode: int = 0
    birth_slot: int = 0
    _encoded: Optional[tuple] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.cost < 0:
            raise ValueError("costs are non-negative")
        if (self.state.edge_queue_bits.shape != self.next_state.edge_queue_bits.shape
                or self.state.load_history.shape != self.next_state.load_history.shape):
            raise ValueError("state and next state differ in dimension")

    @property
    def key(self) -> Tuple[int, int, int]:
        return (self.device, self.episode, self.birth_slot)

    def encoded(self, normalizer: Normalizer) -> tuple:
        if self._encoded is None:
            s_sc, s_h = normalizer.encode(self.state)
            n_sc, n_h = normalizer.encode(self.next_state)
            self._encoded = (s_sc, s_h, self.action.index, self.cost, n_sc, n_h, self.terminal)
        return self._encoded


class ReplayMemory:
    """Bounded FIFO of experiences with O(1) random access."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._buf: List[Experience] = []
        self._head = 0  # index of the oldest entry once full

    def __len__(self) -> int:
        return len(self._buf)

    def __getitem__(self, i: int) -> Experience:
        if not 0 <= i < len(self._buf):
            raise IndexError(i)
        return self._buf[(self._head + i) % len(self._buf)]

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def store(memory: ReplayMemory, e: Experience) -> None:
    if len(memory._buf) < memory.capacity:
        memory._buf.append(e)
    else:
        memory._buf[memory._head] = e
        memory._head = (memory._head + 1) % memory.capacity


# trainer ---------------------------------------------------------------------------------

class Trainer:
    """Evaluation/target networks, replay memory and update counter for one device."""

    def __init__(self, shape: NetShape, normalizer: Normalizer, rng: np.random.Generator, *,
                 gamma: float = 0.9, batch_size: int = 32, replace_threshold: int = 100,
                 memory_capacity: int = 10_000, optimizer: str = "sgd", learning_rate: float = 1e-3,
                 max_grad_norm: Optional[float] = None, init_rng: Optional[np.random.Generator] = None):
        if not 0.0 < gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if replace_threshold < 1:
            raise ValueError("replace_threshold must be at least 1")
        self.normalizer = normalizer
        self.rng = rng
        init_rng = rng if init_rng is None else init_rng
        self.eval_net = NetParams.initialize(shape, init_rng)
        self.target_net = NetParams.initialize(shape, init_rng)
        self.memory = ReplayMemory(memory_capacity)
        self.gamma = gamma
        self.batch_size = batch_size
        self.replace_threshold = replace_threshold
        self.update_count = 0
        self.optimizer = make_optimizer(optimizer, learning_rate)
        self.max_grad_norm = max_grad_norm

    def _batch(self, experiences: Sequence[Experience]):
        enc = [e.encoded(self.normalizer) for e in experiences]
        s_sc = np.stack([x[0] for x in enc])
        s_h = np.stack([x[1] for x in enc])
        a = np.array([x[2] for x in enc])
        c = np.array([x[3] for x in enc], dtype=float)
        n_sc = np.stack([x[4] for x in enc])
        n_h = np.stack([x[5] for x in enc])
        term = np.array([x[6] for x in enc], dtype=bool)
        return s_sc, s_h, a, c, n_sc, n_h, term

    def _targets(self, c, n_sc, n_h, term) -> np.ndarray:
        q_eval_next = q_values(self.eval_net, n_sc, n_h)
        a_next = np.argmin(q_eval_next, axis=1)
        q_target_next = q_values(self.target_net, n_sc, n_h)
        boot = q_target_next[np.arange(len(c)), a_next]
        return c + np.where(term, 0.0, self.gamma * boot)

    def compute_targets(self, experiences: Sequence[Experience]) -> np.ndarray:
        _, _, _, c, n_sc, n_h, term = self._batch(experiences)
        return self._targets(c, n_sc, n_h, term)


def compute_target(trainer: Trainer, e: Experience) -> float:
    """Cost plus the discounted target-net value of the eval-net's preferred next action."""
    return float(trainer.compute_targets([e])[0])


def train_step(trainer: Trainer, memory: Optional[ReplayMemory] = None,
               rng: Optional[np.random.Generator] = None) -> Optional[float]:
    """One gradient update of the evaluation net; ``None`` when memory is too small."""
    memory = trainer.memory if memory is None else memory
    rng = trainer.rng if rng is None else rng
    if len(memory) < trainer.batch_size:
        return None
    idx = rng.choice(len(memory), size=trainer.batch_size, replace=False)
    s_sc, s_h, a, c, n_sc, n_h, term = trainer._batch([memory[int(i)] for i in idx])
    y = trainer._targets(c, n_sc, n_h, term)
    q, trace = forward(trainer.eval_net, s_sc, s_h)
    rows = np.arange(len(a))
    diff = q[rows, a] - y
    loss = float(np.mean(diff * diff))
    dq = np.zeros_like(q)
    dq[rows, a] = 2.0 * diff / len(a)
    grads = backward(trainer.eval_net, trace, dq)
    if trainer.max_grad_norm is not None:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > trainer.max_grad_norm:
            scale = trainer.max_grad_norm / norm
            grads = {k: g * scale for k, g in grads.items()}
    trainer.optimizer.step(trainer.eval_net, grads)
    trainer.update_count += 1
    if trainer.update_count % trainer.replace_threshold == 0:
        copy_into(trainer.eval_net, trainer.target_net)
    return loss


# checkpoints ------------------------------------------------------------------------------
_CKPT_MAGIC = b"MECK"
_CKPT_VERSION = 1
_CKPT_HEAD = "<4sHQII"


def save_checkpoint(trainer: Trainer, path: Union[str, Path]) -> None:
    """Write both networks and the update counter to ``path``."""
    ev, tg = trainer.eval_net.to_bytes(), trainer.target_net.to_bytes()
    head = struct.pack(_CKPT_HEAD, _CKPT_MAGIC, _CKPT_VERSION, trainer.update_count, len(ev), len(tg))
    Path(path).write_bytes(head + ev + tg)


def load_checkpoint(trainer: Trainer, path: Union[str, Path]) -> None:
    """Restore networks and update counter saved by :func:`save_checkpoint` into ``trainer``."""
    buf = Path(path).read_bytes()
    magic, version, count, n_ev, n_tg = struct.unpack_from(_CKPT_HEAD, buf, 0)
    if magic != _CKPT_MAGIC or version != _CKPT_VERSION:
        raise ValueError(f"{path} is not a version {_CKPT_VERSION} checkpoint")
    off = struct.calcsize(_CKPT_HEAD)
    ev = NetParams.from_bytes(buf[off:off + n_ev])
    tg = NetParams.from_bytes(buf[off + n_ev:off + n_ev + n_tg])
    if ev.shape != trainer.eval_net.shape:
        raise ValueError(f"checkpoint shape {ev.shape} does not match trainer shape {trainer.eval_net.shape}")
    copy_into(ev, trainer.eval_net)
    copy_into(tg, trainer.target_net)
    trainer.update_count = int(count)


# device side -----------------------------------------------------------------------------

@dataclass
class _Stub:
    state: Observation
    action: ActionChoice
    next_state: Optional[Observation] = None


class DeviceAgent:
    """Acting and experience bookkeeping for one mobile device."""

    def __init__(self, device: int, trainer_edge: int, normalizer: Normalizer, n_edges: int,
                 rng: np.random.Generator):
        self.device = device
        self.trainer_edge = trainer_edge
        self.normalizer = normalizer
        self.n_edges = n_edges
        self.rng = rng
        self.params: Optional[NetParams] = None
        self.episode = 0
        self.horizon = 0
        self._stubs: Dict[int, _Stub] = {}

    def begin_episode(self, episode: int, horizon: int) -> None:
        self.episode = episode
        self.horizon = horizon
        self._stubs.clear()

    def receive_params(self, params: NetParams) -> None:
        self.params = params

    def observe(self, t: int, obs: Observation) -> None:
        stub = self._stubs.get(t - 1)
        if stub is not None and stub.next_state is None:
            stub.next_state = obs

    def act(self, t: int, obs: Observation, epsilon: float) -> ActionChoice:
        if not obs.has_task:
            raise ValueError("no task to decide on")
        if self.params is None:
            raise RuntimeError("no network parameters received yet")
        a = select_action(self.params, obs, epsilon, self.rng, self.normalizer)
        self._stubs[t] = _Stub(obs, a)
        return a

    def completion_bookkeeping(self, slot: int, cost_events: Sequence[CostEvent]) -> List[Experience]:
        out = []
        for ev in sorted(cost_events, key=lambda e: e.birth_slot):
            stub = self._stubs.pop(ev.birth_slot, None)
            if stub is None:
                raise KeyError(f"device {self.device}: cost for slot {ev.birth_slot} without a stored decision")
            if stub.next_state is None:
                raise RuntimeError(f"device {self.device}: next state of slot {ev.birth_slot} not observed yet")
            out.append(Experience(stub.state, stub.action, ev.cost, stub.next_state,
                                  terminal=ev.birth_slot >= self.horizon, device=self.device,
                                  episode=self.episode, birth_slot=ev.birth_slot))
        return out


def assign_trainer(m: int, tran_capacity: Sequence[float]) -> int:
    """Edge node with the largest link capacity; ties broken by ``m mod N``."""
    caps = np.asarray(tran_capacity, dtype=float)
    best = np.flatnonzero(caps == caps.max())
    return int(best[m % len(best)])
