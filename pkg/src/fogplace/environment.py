"""Placement MDP: latency model, constraint checks, weighted cost and rewards."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ActionError, ConfigError, IncompleteDeploymentError, LifecycleError, OrderingError
from .infrastructure import Infrastructure, TIER_PROFILES
from .security import DEFAULT_THRESHOLDS, SecurityCatalog, SecurityScorer, SecurityThresholds
from .workload import (CPU_MI_RANGE, DEADLINE_MS_RANGE, MEM_MB_RANGE, STORAGE_MB_RANGE,
                       ServiceDag, critical_path, task_order)

DEFAULT_P_FAILURE = -1e6

# log-scale normalization ranges for server features
_MIPS_LO = TIER_PROFILES["iot"].mips_per_core[0] * TIER_PROFILES["iot"].cores[0]
_MIPS_HI = TIER_PROFILES["cloud"].mips_per_core[1] * TIER_PROFILES["cloud"].cores[1]
_IFACE_LO = TIER_PROFILES["iot"].iface_mbps[0]
_IFACE_HI = TIER_PROFILES["cloud"].iface_mbps[1]
_IN_KB_HI = 1e4

TASK_FEATURES = ("cpu", "mem", "storage", "deadline", "in_kb", "critical", "progress")
SERVER_FEATURES = ("mips", "x", "y", "iface", "res_mem", "res_storage", "score", "hard_ok",
                   "ctrl_mean", "latency", "deadline_ok", "capacity_ok", "colocated")


@dataclass(frozen=True)
class EnvConfig:
    alpha: float = 0.5
    beta: float = 0.5
    p_failure: float = DEFAULT_P_FAILURE
    thresholds: SecurityThresholds = DEFAULT_THRESHOLDS
    mask_actions: bool = False
    secure_tiebreak: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or not math.isclose(self.alpha + self.beta, 1.0, abs_tol=1e-9):
            raise ConfigError(f"objective weights must be non-negative and sum to 1 "
                              f"(alpha={self.alpha}, beta={self.beta})")
        if self.p_failure >= 0:
            raise ConfigError("p_failure must be negative")


def _lognorm(x, lo, hi):
    return np.clip((np.log(x) - math.log(lo)) / (math.log(hi) - math.log(lo)), 0.0, 1.0)


class Fleet:
    """Per-(infrastructure, catalog) constants shared by every episode."""

    def __init__(self, infra: Infrastructure, catalog: SecurityCatalog,
                 thresholds: SecurityThresholds = DEFAULT_THRESHOLDS):
        self.infra = infra
        self.catalog = catalog
        self.thresholds = thresholds
        self.scorer = SecurityScorer(infra, catalog, thresholds)
        self.R = len(infra)
        area = infra.area
        self.static = np.column_stack([
            _lognorm(infra.mips, _MIPS_LO, _MIPS_HI),
            np.clip(infra.coords[:, 0] / area, 0, 1),
            np.clip(infra.coords[:, 1] / area, 0, 1),
            _lognorm(infra.iface, _IFACE_LO, _IFACE_HI),
        ]) if self.R else np.zeros((0, 4))
        self.max_mips = float(infra.mips.max())
        self.min_mips = float(infra.mips.min())
        bw = infra.bandwidth_matrix
        off = ~np.eye(self.R, dtype=bool)
        self.min_bw = float(bw[off].min()) if self.R > 1 else float(infra.iface.min())
        self.max_delay = float(infra.delay_matrix.max()) if self.R else 0.0

    @property
    def state_dim(self) -> int:
        return state_dim(self.R)


def state_dim(n_servers: int, n_controls: int = 15) -> int:
    return len(TASK_FEATURES) + n_controls + n_servers * len(SERVER_FEATURES)


def mask_from_state(states: np.ndarray, n_servers: int, n_controls: int = 15) -> np.ndarray:
    """Capacity-feasibility mask recovered from encoded states, shape ``(..., R)``.

    A row with no feasible server is returned fully unmasked.
    """
    k1 = len(TASK_FEATURES) + n_controls
    srv = states[..., k1:].reshape(states.shape[:-1] + (n_servers, len(SERVER_FEATURES)))
    m = srv[..., SERVER_FEATURES.index("capacity_ok")] > 0.5
    none = ~m.any(axis=-1, keepdims=True)
    return m | none


# -- latency -----------------------------------------------------------------

def _transfer_ms(kb: float, bw_mbps, delay_ms):
    return kb * 8.0 / bw_mbps + delay_ms


def completion_time(task_id: int, server: int, assignment: Mapping[int, int],
                    dag: ServiceDag, infra: Infrastructure) -> tuple[float, float, float]:
    """(T_comp, T_wait, T) in ms for ``task_id`` placed on ``server``."""
    task = dag.tasks[task_id]
    comp = task.cpu_mi / infra.mips[server] * 1000.0
    wait = 0.0
    for k in dag.predecessors[task_id]:
        if k not in assignment:
            raise OrderingError(f"predecessor {k} of task {task_id} is not placed")
        src = assignment[k]
        if src != server:
            wait = max(wait, _transfer_ms(dag.edge_kb[(k, task_id)], infra.bandwidth_matrix[src, server],
                                          infra.delay_matrix[src, server]))
    return comp, wait, comp + wait


def completion_times_all(task_id: int, assignment: Mapping[int, int], dag: ServiceDag,
                         infra: Infrastructure) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized over candidate servers: (T_comp, T_wait), each shape (R,)."""
    task = dag.tasks[task_id]
    comp = task.cpu_mi / infra.mips * 1000.0
    wait = np.zeros(len(infra))
    for k in dag.predecessors[task_id]:
        if k not in assignment:
            raise OrderingError(f"predecessor {k} of task {task_id} is not placed")
        src = assignment[k]
        t = _transfer_ms(dag.edge_kb[(k, task_id)], infra.bandwidth_matrix[src], infra.delay_matrix[src])
        t[src] = 0.0
        np.maximum(wait, t, out=wait)
    return comp, wait


def _require_complete(assignment: Mapping[int, int], dag: ServiceDag) -> None:
    missing = [t.id for t in dag.tasks if t.id not in assignment]
    if missing:
        raise IncompleteDeploymentError(f"tasks {missing} are not assigned")


def task_times(assignment: Mapping[int, int], dag: ServiceDag, infra: Infrastructure) -> np.ndarray:
    _require_complete(assignment, dag)
    return np.array([completion_time(h, assignment[h], assignment, dag, infra)[2] for h in range(dag.size)])


def response_time(assignment: Mapping[int, int], dag: ServiceDag, infra: Infrastructure,
                  beta: Sequence[int] | None = None) -> float:
    """Sum of completion times over critical-path tasks."""
    if beta is None:
        beta = critical_path(dag, infra)[1]
    times = task_times(assignment, dag, infra)
    return float(np.dot(beta, times))


def task_latency_bounds(dag: ServiceDag, fleet: Fleet) -> tuple[np.ndarray, np.ndarray]:
    """Per-task (T_min, T_max): fastest server with no transfer vs slowest with worst transfer."""
    c = np.array([t.cpu_mi for t in dag.tasks])
    tmin = c / fleet.max_mips * 1000.0
    tmax = c / fleet.min_mips * 1000.0
    for h in range(dag.size):
        worst = max((_transfer_ms(dag.edge_kb[(k, h)], fleet.min_bw, fleet.max_delay)
                     for k in dag.predecessors[h]), default=0.0)
        tmax[h] += worst
    return tmin, tmax


def latency_bounds(dag: ServiceDag, fleet: Fleet, beta: Sequence[int]) -> tuple[float, float]:
    tmin, tmax = task_latency_bounds(dag, fleet)
    b = np.asarray(beta, dtype=float)
    return float(b @ tmin), float(b @ tmax)


def _norm(x, lo, hi):
    return (x - lo) / (hi - lo) if hi > lo else 0.0


def security_deficit(score: float, th: SecurityThresholds) -> float:
    """Per-task security term; penalized tasks carry the raw penalty magnitude."""
    if score == th.p_constraint:
        return abs(th.p_constraint)
    return (th.score_max - score) / (th.score_max - th.score_min)


# -- constraints and objective ----------------------------------------------

@dataclass
class ConstraintReport:
    unassigned: list[int] = field(default_factory=list)
    invalid_server: list[int] = field(default_factory=list)
    memory_overload: dict[int, float] = field(default_factory=dict)
    storage_overload: dict[int, float] = field(default_factory=dict)
    late_tasks: list[int] = field(default_factory=list)

    @property
    def placement_ok(self) -> bool:
        return not self.unassigned and not self.invalid_server

    @property
    def memory_ok(self) -> bool:
        return not self.memory_overload

    @property
    def storage_ok(self) -> bool:
        return not self.storage_overload

    @property
    def deadlines_ok(self) -> bool:
        return not self.late_tasks

    @property
    def ok(self) -> bool:
        return self.placement_ok and self.memory_ok and self.storage_ok and self.deadlines_ok


def check_constraints(assignment: Mapping[int, int], dag: ServiceDag, infra: Infrastructure) -> ConstraintReport:
    rep = ConstraintReport()
    R = len(infra)
    for t in dag.tasks:
        s = assignment.get(t.id)
        if s is None:
            rep.unassigned.append(t.id)
        elif not 0 <= s < R:
            rep.invalid_server.append(t.id)
    mem = np.zeros(R)
    sto = np.zeros(R)
    placed = {h: s for h, s in assignment.items() if 0 <= s < R}
    for h, s in placed.items():
        mem[s] += dag.tasks[h].mem_mb
        sto[s] += dag.tasks[h].storage_mb
    rep.memory_overload = {int(s): float(mem[s]) for s in np.flatnonzero(mem > infra.mem)}
    rep.storage_overload = {int(s): float(sto[s]) for s in np.flatnonzero(sto > infra.storage)}
    if rep.placement_ok:
        times = task_times(assignment, dag, infra)
        rep.late_tasks = [t.id for t in dag.tasks if times[t.id] > t.deadline_ms]
    return rep


@dataclass(frozen=True)
class CostBreakdown:
    response_time: float
    security_score: float
    security_sum: float
    latency_term: float
    security_term: float
    weighted_cost: float
    l_min: float
    l_max: float
    n_security_violations: int


def weighted_cost(assignment: Mapping[int, int], dag: ServiceDag, fleet: Fleet,
                  alpha: float = 0.5, beta: float = 0.5, crit: Sequence[int] | None = None) -> CostBreakdown:
    EnvConfig(alpha=alpha, beta=beta)  # validates the weights
    _require_complete(assignment, dag)
    infra, th = fleet.infra, fleet.thresholds
    if crit is None:
        crit = critical_path(dag, infra)[1]
    L = response_time(assignment, dag, infra, crit)
    lmin, lmax = latency_bounds(dag, fleet, crit)
    scores = np.array([fleet.scorer.score(t.controls, assignment[t.id]) for t in dag.tasks])
    S = float(scores.mean())
    lat = _norm(L, lmin, lmax)
    sec = float(np.mean([security_deficit(s, th) for s in scores]))
    return CostBreakdown(L, S, float(scores.sum()), lat, sec, alpha * lat + beta * sec, lmin, lmax,
                         int(np.sum(scores == th.p_constraint)))


def exhaustive_placement(dag: ServiceDag, fleet: Fleet, alpha: float = 0.5, beta: float = 0.5,
                         limit: int = 100_000) -> tuple[dict[int, int], CostBreakdown]:
    """Exact argmin of the weighted cost by enumerating all ``R**K`` placements.

    Ties keep the lexicographically smallest assignment. Only for tiny instances.
    """
    R, K = fleet.R, dag.size
    if R ** K > limit:
        raise ValueError(f"{R}**{K} placements exceed the enumeration limit {limit}")
    crit = critical_path(dag, fleet.infra)[1]
    best, best_cost = None, None
    for combo in itertools.product(range(R), repeat=K):
        assign = dict(enumerate(combo))
        cost = weighted_cost(assign, dag, fleet, alpha, beta, crit)
        if best_cost is None or cost.weighted_cost < best_cost.weighted_cost:
            best, best_cost = assign, cost
    return best, best_cost


# -- episode ------------------------------------------------------------------

@dataclass
class Deployment:
    assignment: dict[int, int]
    residual_mem: np.ndarray
    residual_storage: np.ndarray

    @classmethod
    def empty(cls, infra: Infrastructure) -> "Deployment":
        return cls({}, infra.mem.copy(), infra.storage.copy())

    def place(self, task, server: int) -> bool:
        """Assign and reserve; returns False if the reservation overflows."""
        self.assignment[task.id] = server
        self.residual_mem[server] -= task.mem_mb
        self.residual_storage[server] -= task.storage_mb
        return self.residual_mem[server] >= 0 and self.residual_storage[server] >= 0


@dataclass
class StepOutcome:
    reward: float
    state: np.ndarray
    done: bool
    info: dict


@dataclass
class EpisodeSummary:
    service_id: str
    tasks: int
    response_time_ms: float
    security_score: float
    security_sum: float
    weighted_cost: float
    security_violations: int
    deadline_violations: int
    capacity_violations: int
    episode_return: float
    violating_tasks: int
    task_times: list[float]
    task_scores: list[float]

    CSV_FIELDS = ("service_id", "tasks", "response_time_ms", "security_score", "security_sum",
                  "weighted_cost", "security_violations", "deadline_violations",
                  "capacity_violations", "episode_return", "violating_tasks", "task_times_ms", "task_scores")

    def csv_row(self) -> dict:
        row = {k: getattr(self, k) for k in self.CSV_FIELDS[:-2]}
        row["task_times_ms"] = ";".join(f"{t:.6g}" for t in self.task_times)
        row["task_scores"] = ";".join(f"{s:.6g}" for s in self.task_scores)
        return row


def write_episode_csv(rows: Iterable[EpisodeSummary], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EpisodeSummary.CSV_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(r.csv_row())


class PlacementEnv:
    """One service episode: K sequential placement decisions in task order."""

    def __init__(self, dag: ServiceDag, fleet: Fleet, config: EnvConfig = EnvConfig(),
                 order: Sequence[int] | None = None):
        self.dag = dag
        self.fleet = fleet
        self.config = config
        infra = fleet.infra
        hard = fleet.catalog.hard_controls if config.secure_tiebreak else None
        self.order = tuple(order) if order is not None else task_order(dag, infra, hard)
        self.crit_path, self.crit = critical_path(dag, infra)
        self.tmin, self.tmax = task_latency_bounds(dag, fleet)
        self.l_min, self.l_max = float(self.crit @ self.tmin), float(self.crit @ self.tmax)
        sc = fleet.scorer
        self.scores = np.array([sc.scores_all(t.controls) for t in dag.tasks])  # (K, R)
        self.ctrl_mean = np.array([sc.ctrl_scores[:, sorted(t.controls)].mean(axis=1) / 100.0
                                   for t in dag.tasks])
        self.in_kb = np.zeros(dag.size)
        for e in dag.edges:
            self.in_kb[e.dst] += e.kb
        self._task_feats = self._task_features()
        self.reset()

    @property
    def R(self) -> int:
        return self.fleet.R

    @property
    def state_dim(self) -> int:
        return self.fleet.state_dim

    def _task_features(self) -> np.ndarray:
        K = self.dag.size
        n_ctrl = self.fleet.catalog.n_controls
        out = np.zeros((K, len(TASK_FEATURES) + n_ctrl))
        for h, t in enumerate(self.dag.tasks):
            out[h, 0] = t.cpu_mi / CPU_MI_RANGE[1]
            out[h, 1] = t.mem_mb / MEM_MB_RANGE[1]
            out[h, 2] = t.storage_mb / STORAGE_MB_RANGE[1]
            out[h, 3] = t.deadline_ms / DEADLINE_MS_RANGE[1]
            out[h, 4] = math.log1p(self.in_kb[h]) / math.log1p(_IN_KB_HI)
            out[h, 5] = self.crit[h]
            out[h, 7 + np.array(sorted(t.controls), dtype=int)] = 1.0
        return np.clip(out, 0.0, 1.0)

    def reset(self) -> np.ndarray:
        self.deployment = Deployment.empty(self.fleet.infra)
        self.t = 0
        self.rewards: list[float] = []
        self.times = np.zeros(self.dag.size)
        self.viol = {"deadline": 0, "capacity": 0, "security": 0, "any": 0}
        self._cache = None
        return self.state()

    @property
    def done(self) -> bool:
        return self.t >= self.dag.size

    @property
    def current_task(self) -> int:
        if self.done:
            raise LifecycleError("episode is finished")
        return self.order[self.t]

    def candidate_times(self) -> tuple[np.ndarray, np.ndarray]:
        """(T_comp, T_wait) of the current task on every server."""
        if self._cache is None:
            self._cache = completion_times_all(self.current_task, self.deployment.assignment,
                                               self.dag, self.fleet.infra)
        return self._cache

    def action_mask(self) -> np.ndarray:
        h = self.current_task
        task = self.dag.tasks[h]
        d = self.deployment
        return (d.residual_mem >= task.mem_mb) & (d.residual_storage >= task.storage_mb)

    def state(self) -> np.ndarray:
        if self.done:
            return np.zeros(self.state_dim)
        h = self.current_task
        task = self.dag.tasks[h]
        infra = self.fleet.infra
        d = self.deployment
        comp, wait = self.candidate_times()
        T = comp + wait
        tf = self._task_feats[h].copy()
        tf[6] = self.t / self.dag.size
        span = self.tmax[h] - self.tmin[h]
        lat = np.clip((T - self.tmin[h]) / span, 0, 1) if span > 0 else np.zeros(self.R)
        preds = self.dag.predecessors[h]
        coloc = np.zeros(self.R)
        for k in preds:
            coloc[d.assignment[k]] += 1.0 / len(preds)
        scores = self.scores[h]
        srv = np.column_stack([
            self.fleet.static,
            np.clip(d.residual_mem / infra.mem, 0, 1),
            np.clip(d.residual_storage / infra.storage, 0, 1),
            np.clip(scores, 0, 100) / 100.0,
            (scores != self.fleet.thresholds.p_constraint).astype(float),
            self.ctrl_mean[h],
            lat,
            (T <= task.deadline_ms).astype(float),
            self.action_mask().astype(float),
            coloc,
        ])
        return np.concatenate([tf, srv.ravel()])

    def task_reward_terms(self, h: int, server: int, T: float) -> tuple[float, float]:
        """(latency term, security term) of the per-task weighted cost."""
        span = self.tmax[h] - self.tmin[h]
        lat = self.crit[h] * (_norm(T, self.tmin[h], self.tmax[h]) if span > 0 else 0.0)
        sec = security_deficit(self.scores[h, server], self.fleet.thresholds)
        return lat, sec

    def step(self, action: int) -> StepOutcome:
        if self.done:
            raise LifecycleError("step() called after the episode finished")
        a = int(action)
        if not 0 <= a < self.R:
            raise ActionError(f"action {action} outside [0, {self.R})")
        cfg = self.config
        h = self.current_task
        task = self.dag.tasks[h]
        comp, wait = self.candidate_times()
        tc, tw = float(comp[a]), float(wait[a])
        T = tc + tw
        cap_ok = self.deployment.place(task, a)
        self.times[h] = T
        late = T > task.deadline_ms
        score = float(self.scores[h, a])
        sec_viol = score == self.fleet.thresholds.p_constraint
        lat, sec = self.task_reward_terms(h, a, T)
        if late or not cap_ok:
            r = cfg.p_failure
        else:
            r = -(cfg.alpha * lat + cfg.beta * sec)
        self.viol["deadline"] += int(late)
        self.viol["capacity"] += int(not cap_ok)
        self.viol["security"] += int(sec_viol)
        self.viol["any"] += int(late or not cap_ok or sec_viol)
        self.rewards.append(r)
        self.t += 1
        self._cache = None
        info = {"task": h, "server": a, "t_comp": tc, "t_wait": tw, "t": T, "score": score,
                "deadline_violation": late, "capacity_violation": not cap_ok,
                "security_violation": sec_viol}
        if self.done:
            info["summary"] = self.summary()
        return StepOutcome(r, self.state(), self.done, info)

    def summary(self) -> EpisodeSummary:
        if not self.done:
            raise LifecycleError("episode still running")
        assign = self.deployment.assignment
        scores = np.array([self.scores[h, assign[h]] for h in range(self.dag.size)])
        th = self.fleet.thresholds
        L = float(self.crit @ self.times)
        sec = float(np.mean([security_deficit(s, th) for s in scores]))
        W = self.config.alpha * _norm(L, self.l_min, self.l_max) + self.config.beta * sec
        return EpisodeSummary(
            service_id=self.dag.id, tasks=self.dag.size, response_time_ms=L,
            security_score=float(scores.mean()), security_sum=float(scores.sum()),
            weighted_cost=float(W), security_violations=self.viol["security"],
            deadline_violations=self.viol["deadline"], capacity_violations=self.viol["capacity"],
            episode_return=float(sum(self.rewards)), violating_tasks=self.viol["any"],
            task_times=self.times.tolist(),
            task_scores=scores.tolist(),
        )


def compose_state(dag: ServiceDag, order: Sequence[int], step: int, deployment: Deployment,
                  fleet: Fleet, config: EnvConfig = EnvConfig()) -> np.ndarray:
    """Stand-alone state encoding for an arbitrary partial deployment."""
    env = PlacementEnv(dag, fleet, config, order=order)
    if not 0 <= step < dag.size:
        raise IndexError(f"step {step} outside [0, {dag.size})")
    env.t = step
    env.deployment = Deployment(dict(deployment.assignment), deployment.residual_mem.copy(),
                                deployment.residual_storage.copy())
    env._cache = None  # reset() cached step-0 candidate times
    return env.state()
