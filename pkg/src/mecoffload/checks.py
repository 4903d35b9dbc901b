"""Self-checks behind ``mecoffload check``: oracle equivalence and learning-stack identities."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import oracle
from .config import RunConfig
from .env import ActionChoice, MECEnvironment
from .neural import NetParams, NetShape, backward, forward


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


# queue timing ------------------------------------------------------------------------------

def random_small_config(rng: np.random.Generator) -> RunConfig:
    """A tiny, often congested system with multi-slot service and short deadlines."""
    n_sizes = int(rng.integers(1, 4))
    return RunConfig(
        M=int(rng.integers(1, 4)), N=int(rng.integers(1, 3)), T=int(rng.integers(5, 31)),
        episodes=1, delta_s=0.1,
        f_device_ghz=float(rng.uniform(0.05, 1.0)),
        f_edge_ghz=float(rng.uniform(0.1, 3.0)),
        f_tran_mbps=float(rng.uniform(3.0, 30.0)),
        sizes_mbits=sorted({round(float(x), 1) for x in rng.uniform(0.5, 5.0, n_sizes)}),
        density_gcycles_per_mbit=float(rng.uniform(0.05, 0.5)),
        deadline_slots=int(rng.integers(1, 12)),
        arrival_probability=float(rng.uniform(0.2, 1.0)),
        t_step=3, policy="random",
    )


@dataclass
class InstanceReport:
    mismatches: List[str] = field(default_factory=list)
    n_tasks: int = 0
    n_edge_tasks: int = 0


def compare_instance(cfg: RunConfig, seed: int, action_rng: np.random.Generator) -> InstanceReport:
    """Drive the simulator with random decisions and compare every task outcome with the oracle."""
    env = MECEnvironment(cfg)
    env.reset(seed, 0)
    outcomes: Dict[int, Tuple[int, bool]] = {}
    while not env.done:
        for m in range(cfg.M):
            if env.arrival(m) is not None:
                env.apply_action(m, ActionChoice.from_index(int(action_rng.integers(cfg.N + 1)), cfg.N))
        for evs in env.step_world().values():
            for ev in evs:
                outcomes[ev.task_id] = (ev.slot, ev.dropped)
    env.check_accounting()

    rho = cfg.density_cycles_per_bit
    tasks = [oracle.OracleTask(t.id, t.device, t.birth_slot, t.size_bits, t.deadline_slot,
                               env.decisions[t.id].edge_choice)
             for t in env.tasks.values()]
    ref, load = oracle.simulate(tasks, M=cfg.M, N=cfg.N, T=cfg.T, local_bits=cfg.device_cycles_per_slot / rho,
                                tran_bits=cfg.tran_bits_per_slot, edge_cycles=cfg.edge_cycles_per_slot,
                                density=rho)
    report = InstanceReport(n_tasks=len(tasks))
    for task in tasks:
        got = outcomes.get(task.id)
        exp = ref.get(task.id)
        exp_pair = (exp.slot, exp.dropped) if exp is not None and exp.slot > 0 else None
        if got != exp_pair:
            report.mismatches.append(f"task {task.id}: simulator {got}, oracle {exp_pair}")

    # active-queue counts and prefix-sum completion slots at the edges
    for n in range(cfg.N):
        got_load = [int(c[n]) for c in env.load_counts]
        if got_load != load[n]:
            report.mismatches.append(f"edge {n}: load series {got_load} != oracle {load[n]}")
        for m in range(cfg.M):
            queue = sorted((ref[t.id].edge_arrival, t) for t in tasks
                           if t.target == n and t.device == m and t.id in ref and ref[t.id].edge_arrival)
            if not queue:
                continue
            report.n_edge_tasks += len(queue)
            closed = oracle.edge_finish_from_prefix_sums(
                [(t.id, t.size, arr, t.deadline) for arr, t in queue], load[n],
                cfg.edge_cycles_per_slot, rho, cfg.T)
            for _, t in queue:
                sim_slot = env.edges[n].finish_slots.get(t.id)
                if closed[t.id] != sim_slot:
                    report.mismatches.append(f"task {t.id} at edge {n}: simulator finish {sim_slot}, "
                                             f"prefix sums {closed[t.id]}")
    return report


def oracle_equivalence(instances: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad, tasks, edge_tasks = [], 0, 0
    for k in range(instances):
        cfg = random_small_config(rng)
        rep = compare_instance(cfg, seed=k, action_rng=rng)
        tasks += rep.n_tasks
        edge_tasks += rep.n_edge_tasks
        if rep.mismatches:
            bad.append(f"instance {k}: {rep.mismatches[0]}")
    detail = f"{instances} instances, {tasks} tasks, {edge_tasks} edge tasks"
    if bad:
        detail += f"; {len(bad)} mismatching, first: {bad[0]}"
    return CheckResult("queueing oracle equivalence", not bad, detail)


# learning stack ------------------------------------------------------------------------------

def finite_difference_check(params: NetParams, loss_fn: Callable[[NetParams], float],
                            analytic: Dict[str, np.ndarray], step: float = 1e-4,
                            rtol: float = 1e-3, atol: float = 1e-7) -> Tuple[bool, str]:
    """Compare every analytic gradient entry with a central difference of ``loss_fn``."""
    worst = (0.0, "")
    ok = True
    for name, arr in params.arrays.items():
        g = analytic[name]
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + step
            up = loss_fn(params)
            arr[idx] = orig - step
            down = loss_fn(params)
            arr[idx] = orig
            num = (up - down) / (2 * step)
            err = abs(num - g[idx])
            rel = err / max(abs(num), abs(g[idx]), 1e-12)
            if err > atol and rel > rtol:
                ok = False
                if rel > worst[0]:
                    worst = (rel, f"{name}{list(idx)}: analytic {g[idx]:.6g} vs numeric {num:.6g}")
    return ok, worst[1]


def gradient_check(seed: int = 0, lstm_hidden: int = 4, fc: Tuple[int, int] = (8, 8), t_step: int = 3,
                   n_edges: int = 2, batch: int = 4) -> CheckResult:
    rng = np.random.default_rng(seed)
    shape = NetShape(n_edges, t_step, lstm_hidden, fc[0], fc[1], head=8)
    params = NetParams.initialize(shape, rng)
    for arr in params.arrays.values():  # non-trivial biases so every gate path carries gradient
        arr += rng.normal(0.0, 0.3, arr.shape)
    sc = rng.uniform(0, 1, (batch, shape.n_scalars))
    hist = rng.uniform(0, 1, (batch, t_step, n_edges))
    target = rng.normal(0, 1, (batch, shape.n_actions))
    weights = rng.uniform(0.5, 1.5, (batch, shape.n_actions))

    def loss(p: NetParams) -> float:
        q, _ = forward(p, sc, hist)
        return float(np.sum(weights * (q - target) ** 2))

    q, trace = forward(params, sc, hist)
    grads = backward(params, trace, 2 * weights * (q - target))
    ok, worst = finite_difference_check(params, loss, grads)
    return CheckResult("gradient correctness", ok,
                       f"{params.n_parameters()} parameters checked" + (f"; worst {worst}" if worst else ""))


def dueling_identity(samples: int = 100, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    shape = NetShape(2, 3, 8, 16, 16)
    params = NetParams.initialize(shape, rng)
    for arr in params.arrays.values():
        arr += rng.normal(0.0, 0.5, arr.shape)
    q, trace = forward(params, rng.uniform(0, 1, (samples, shape.n_scalars)),
                       rng.uniform(0, 1, (samples, 3, 2)))
    err = float(np.max(np.abs(q.mean(axis=1) - trace.value[:, 0])))
    return CheckResult("dueling identity", err <= 1e-6, f"max |mean(Q) - V| = {err:.3g}")


def constant_q_net(shape: NetShape, q: np.ndarray) -> NetParams:
    """A network whose output is ``q`` for every input (all weights zero, biases set)."""
    q = np.asarray(q, dtype=float)
    arrays = OrderedDict((name, np.zeros(shp)) for name, shp in shape.param_shapes())
    arrays["A_b"][:] = q
    arrays["V_b"][:] = q.mean()
    return NetParams(shape, arrays)


def double_dqn_wiring() -> CheckResult:
    from .agent import Experience, Normalizer, Trainer, compute_target
    from .env import Observation

    shape = NetShape(2, 3, 4, 8, 8)
    trainer = Trainer(shape, Normalizer(5e6, 10, 10), np.random.default_rng(0), gamma=0.9)
    trainer.eval_net = constant_q_net(shape, [5.0, 2.0, 7.0])
    trainer.target_net = constant_q_net(shape, [1.0, 4.0, 0.5])
    obs = Observation(3e6, 0, 0, np.zeros(2), np.zeros((3, 2)))
    exp = Experience(obs, ActionChoice(True), 3.0, obs)
    got = compute_target(trainer, exp)
    # eval argmin is index 1 (2.0); target value there is 4.0, while target's own argmin would give 0.5
    expected = 3.0 + 0.9 * 4.0
    return CheckResult("double-DQN wiring", abs(got - expected) < 1e-12, f"target {got} (expected {expected})")


def run_all(instances: int = 1000) -> List[CheckResult]:
    return [oracle_equivalence(instances), gradient_check(), dueling_identity(), double_dqn_wiring()]
