"""Experiment driver: baseline policies, episode loop, metrics and CSV output."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence

import numpy as np

from .agent import DeviceAgent, Normalizer, Trainer, assign_trainer, epsilon_schedule, save_checkpoint
from .config import EVAL_EPISODE_OFFSET, INIT, POLICY, TRAINING, RunConfig, coerce, substream
from .env import ActionChoice, CostEvent, MECEnvironment, Observation
from .messages import EdgeTrainerHub, ExperienceUpload, InProcessChannel, ParameterRequest
from .neural import NetShape

log = logging.getLogger(__name__)


# baseline policies --------------------------------------------------------------------

def policy_no_offload(obs: Observation, rng: Optional[np.random.Generator] = None) -> ActionChoice:
    return ActionChoice(True)


def policy_random(obs: Observation, rng: np.random.Generator) -> ActionChoice:
    n_edges = len(obs.edge_queue_bits)
    return ActionChoice.from_index(int(rng.integers(n_edges + 1)), n_edges)


@dataclass(frozen=True)
class ServiceRates:
    """Nominal per-slot service rates, in bits, as known to a device."""

    local_bits: float
    tran_bits: float
    edge_bits: float

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "ServiceRates":
        rho = cfg.density_cycles_per_bit
        return cls(cfg.device_cycles_per_slot / rho, cfg.tran_bits_per_slot, cfg.edge_cycles_per_slot / rho)


def _slots(size: float, rate: float) -> int:
    return max(math.ceil(size / rate - 1e-12), 1)


def myopic_estimates(obs: Observation, rates: ServiceRates) -> np.ndarray:
    """Estimated slots until completion for local processing and each edge node."""
    size = obs.task_size_bits
    est = [obs.comp_wait_slots + _slots(size, rates.local_bits)]
    latest = obs.load_history[-1]
    for n in range(len(obs.edge_queue_bits)):
        share = rates.edge_bits / max(1.0, latest[n])
        est.append(obs.tran_wait_slots + _slots(size, rates.tran_bits) + _slots(size, share))
    return np.asarray(est, dtype=float)


def policy_myopic_estimate(obs: Observation, rates: ServiceRates) -> ActionChoice:
    est = myopic_estimates(obs, rates)
    return ActionChoice.from_index(int(np.argmin(est)), len(est) - 1)


# metrics ----------------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsRow:
    episode: int
    arrivals: int
    completed: int
    dropped: int
    in_flight_at_end: int
    drop_ratio: float
    avg_delay_s: float
    mean_cost: float

    @classmethod
    def from_counts(cls, episode: int, arrivals: int, completed: int, dropped: int, in_flight: int,
                    delay_slots_sum: float, cost_sum: float, delta_s: float) -> "MetricsRow":
        if arrivals != completed + dropped + in_flight:
            raise AssertionError(f"episode {episode}: arrivals={arrivals} != completed={completed} + "
                                 f"dropped={dropped} + in_flight={in_flight}")
        n_events = completed + dropped
        return cls(episode, arrivals, completed, dropped, in_flight,
                   round(dropped / arrivals, 6) if arrivals else 0.0,
                   round(delay_slots_sum * delta_s / completed, 6) if completed else 0.0,
                   round(cost_sum / n_events, 6) if n_events else 0.0)


CSV_COLUMNS = [f.name for f in fields(MetricsRow)]


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def emit_csv(rows: Sequence[MetricsRow], path, overwrite: bool = False) -> None:
    path = Path(path)
    if path.exists() and not overwrite:
        raise FileExistsError(f"{path} exists; pass overwrite=True to replace it")
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for r in rows:
                w.writerow([_fmt(v) for v in astuple(r)])
    except OSError as exc:
        raise OSError(f"could not write metrics to {path}: {exc}") from exc


def read_csv(path) -> List[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        return [MetricsRow(*(int(r[c]) for c in CSV_COLUMNS[:5]), *(float(r[c]) for c in CSV_COLUMNS[5:]))
                for r in reader]


# experiment ----------------------------------------------------------------------------------

class Experiment:
    """One configured system: environment, per-device controllers and edge trainers."""

    def __init__(self, cfg: RunConfig, trace: bool = False, wire: bool = True):
        self.cfg = cfg.validate()
        self.env = MECEnvironment(cfg, trace=trace)
        self.rates = ServiceRates.from_config(cfg)
        self.normalizer = Normalizer.from_config(cfg)
        self.kinds = [cfg.policy_for(m) for m in range(cfg.M)]
        self.agents: Dict[int, DeviceAgent] = {}
        self.train_steps = 0
        drl = [m for m, k in enumerate(self.kinds) if k == "drl"]
        if drl and cfg.N < 1:
            raise ValueError("learning devices need at least one edge node to train on")
        shape = NetShape(cfg.N, cfg.t_step, cfg.lstm_hidden, cfg.fc1, cfg.fc2, cfg.head)
        per_edge: Dict[int, Dict[int, Trainer]] = {n: {} for n in range(cfg.N)}
        for m in drl:
            n_m = assign_trainer(m, [cfg.tran_bits_per_slot] * cfg.N)
            per_edge[n_m][m] = Trainer(
                shape, self.normalizer, substream(cfg.seed, TRAINING, 0, m),
                gamma=cfg.gamma, batch_size=cfg.batch_size, replace_threshold=cfg.replace_threshold,
                memory_capacity=cfg.memory_capacity, optimizer=cfg.optimizer, learning_rate=cfg.learning_rate,
                max_grad_norm=cfg.max_grad_norm,
                init_rng=substream(cfg.seed, INIT, 0, m))
            self.agents[m] = DeviceAgent(m, n_m, self.normalizer, cfg.N, None)
        self.hubs = {n: EdgeTrainerHub(n, tr) for n, tr in per_edge.items() if tr}
        self.channel = InProcessChannel(self.hubs, wire=wire)

    def trainers(self) -> Dict[int, Trainer]:
        return {m: t for hub in self.hubs.values() for m, t in hub.trainers.items()}

    def run_episode(self, episode: int, epsilon: float = 0.0, learn: bool = True,
                    on_slot: Optional[Callable[[int, Dict[int, List[CostEvent]]], None]] = None) -> MetricsRow:
        cfg, env = self.cfg, self.env
        env.reset(cfg.seed, episode)
        policy_rngs = [substream(cfg.seed, POLICY, episode, m) for m in range(cfg.M)]
        for m, agent in self.agents.items():
            agent.begin_episode(episode, cfg.T)
            agent.rng = policy_rngs[m]
        pending: Dict[int, List[CostEvent]] = {m: [] for m in self.agents}
        delay_sum = 0.0
        cost_sum = 0.0
        steps_before = sum(t.update_count for t in self.trainers().values())

        def flush(t: int) -> None:
            for m, agent in self.agents.items():
                agent.observe(t, env.observe(m))
                if pending[m]:
                    for exp in agent.completion_bookkeeping(t - 1, pending[m]):
                        if learn:
                            self.channel.send(agent.trainer_edge, ExperienceUpload(m, exp))
                    pending[m] = []

        while not env.done:
            t = env.t
            flush(t)
            for m in range(cfg.M):
                if env.arrival(m) is None:
                    continue
                obs = env.observe(m)
                kind = self.kinds[m]
                if kind == "drl":
                    agent = self.agents[m]
                    reply = self.channel.send(agent.trainer_edge, ParameterRequest(m))
                    agent.receive_params(reply.params())
                    a = agent.act(t, obs, epsilon)
                elif kind == "no_offload":
                    a = policy_no_offload(obs)
                elif kind == "random":
                    a = policy_random(obs, policy_rngs[m])
                else:
                    a = policy_myopic_estimate(obs, self.rates)
                env.apply_action(m, a)
            events = env.step_world()
            for m, evs in events.items():
                for ev in evs:
                    cost_sum += ev.cost
                    if not ev.dropped:
                        delay_sum += ev.delay_slots
                if m in pending:
                    pending[m].extend(evs)
            if on_slot is not None:
                on_slot(t, events)
        flush(env.t)
        env.check_accounting()
        self.train_steps = sum(t.update_count for t in self.trainers().values())
        row = MetricsRow.from_counts(episode, env.n_arrivals, env.n_completed, env.n_dropped, env.in_flight(),
                                     delay_sum, cost_sum, cfg.delta_s)
        log.debug("episode %d: %d train steps", episode, self.train_steps - steps_before)
        return row

    def train(self, episodes: Optional[int] = None) -> Iterator[MetricsRow]:
        total = self.cfg.episodes if episodes is None else episodes
        for ep in range(1, total + 1):
            eps = epsilon_schedule(ep, total, self.cfg.epsilon_start, self.cfg.epsilon_end)
            start = time.perf_counter()
            row = self.run_episode(ep, epsilon=eps, learn=True)
            log.info("episode %d eps=%.3f drop_ratio=%.4f avg_delay=%.4fs train_steps=%d wall=%.2fs",
                     ep, eps, row.drop_ratio, row.avg_delay_s, self.train_steps, time.perf_counter() - start)
            yield row

    def evaluate(self, episodes: Optional[int] = None) -> List[MetricsRow]:
        n = self.cfg.eval_episodes if episodes is None else episodes
        return [self.run_episode(EVAL_EPISODE_OFFSET + k, epsilon=self.cfg.eval_epsilon, learn=False)
                for k in range(1, n + 1)]


def has_learners(cfg: RunConfig) -> bool:
    return any(cfg.policy_for(m) == "drl" for m in range(cfg.M))


@dataclass
class ExperimentResult:
    rows: List[MetricsRow]
    eval_rows: List[MetricsRow]

    @property
    def eval_drop_ratio(self) -> float:
        return float(np.mean([r.drop_ratio for r in self.eval_rows])) if self.eval_rows else float("nan")

    @property
    def eval_avg_delay_s(self) -> float:
        return float(np.mean([r.avg_delay_s for r in self.eval_rows])) if self.eval_rows else float("nan")


def run_experiment(cfg: RunConfig, csv_path=None, overwrite: bool = False, eval_csv_path=None,
                   trace_path=None, checkpoint_dir=None) -> ExperimentResult:
    """Train (or just run) ``cfg.episodes`` episodes; learners are then evaluated greedily."""
    exp = Experiment(cfg, trace=trace_path is not None)
    rows = []
    for row in exp.train():
        rows.append(row)
    if trace_path is not None:
        exp.env.write_trace(trace_path)
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
        for m, trainer in exp.trainers().items():
            save_checkpoint(trainer, Path(checkpoint_dir) / f"device{m}.ckpt")
    eval_rows = exp.evaluate() if has_learners(cfg) else []
    if csv_path is not None:
        emit_csv(rows, csv_path, overwrite=overwrite)
    if eval_csv_path is not None and eval_rows:
        emit_csv(eval_rows, eval_csv_path, overwrite=overwrite)
    return ExperimentResult(rows, eval_rows)


def evaluate_baseline(cfg: RunConfig, policy: str, episodes: Optional[int] = None) -> List[MetricsRow]:
    """Baseline metrics on the same held-out episodes used to evaluate learners."""
    exp = Experiment(cfg.replace(policy=policy, device_policies=None))
    return exp.evaluate(episodes)


# sweeps ------------------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    axis: str
    value: float
    policy: str
    seeds: int
    drop_ratio: float
    drop_ratio_se: float
    avg_delay_s: float


def seed_metric(cfg: RunConfig) -> tuple[float, float]:
    """Mean drop ratio and delay of one configuration/seed (evaluation episodes for learners)."""
    if has_learners(cfg):
        res = run_experiment(cfg)
        rows = res.eval_rows
    else:
        rows = list(Experiment(cfg).train())
    return float(np.mean([r.drop_ratio for r in rows])), float(np.mean([r.avg_delay_s for r in rows]))


def sweep(cfg: RunConfig, axis: str, values: Sequence, seeds: Sequence[int],
          policies: Sequence[str]) -> List[SweepRow]:
    out = []
    for value in values:
        v = coerce(axis, value)
        for policy in policies:
            drops, delays = [], []
            for s in seeds:
                d, dl = seed_metric(cfg.replace(**{axis: v}, policy=policy, device_policies=None, seed=s).validate())
                drops.append(d)
                delays.append(dl)
            se = float(np.std(drops, ddof=1) / np.sqrt(len(drops))) if len(drops) > 1 else 0.0
            out.append(SweepRow(axis, float(v), policy, len(seeds), round(float(np.mean(drops)), 6),
                                round(se, 6), round(float(np.mean(delays)), 6)))
            log.info("sweep %s=%s %s drop_ratio=%.4f", axis, v, policy, out[-1].drop_ratio)
    return out


def emit_sweep_csv(rows: Sequence[SweepRow], path, overwrite: bool = False) -> None:
    path = Path(path)
    if path.exists() and not overwrite:
        raise FileExistsError(f"{path} exists; pass overwrite=True to replace it")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f.name for f in fields(SweepRow)])
        for r in rows:
            w.writerow([_fmt(v) for v in astuple(r)])
