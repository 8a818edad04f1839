"""Experiment driver: configuration, broker/learner wiring, reference
policies, evaluation and the speedup benchmark."""

from __future__ import annotations

import csv
import json
import math
import multiprocessing as mp
import queue
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .broker import ARGMAX, Broker, BrokerConfig, decision_engine
from .environment import EnvConfig, EpisodeSummary, Fleet, PlacementEnv
from .errors import CheckpointError, ConfigError
from .infrastructure import TIERS, Infrastructure, generate_infrastructure
from .learner import METRIC_FIELDS, Learner, LearnerConfig, PolicySnapshot
from .neuronet import NetShape, RecurrentNet, load_checkpoint, save_checkpoint
from .security import SecurityCatalog
from .workload import ServiceDag, ServiceGenerator, load_services

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

TRAIN_FIELDS = METRIC_FIELDS + ("env_steps", "episodes", "steps_per_sec", "train_weighted_cost",
                                "eval_weighted_cost", "eval_response_time_ms", "eval_security_score",
                                "eval_violation_rate")
EXECUTORS = ("inline", "process")
SUBMIT_QUEUE = 16


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    alpha: float = 0.5
    beta: float = 0.5
    servers: tuple[int, int, int] = (20, 30, 50)  # cloud, fog, iot
    area_m: float = 100_000.0
    cnf_mode: str = "control"
    infra_path: str = ""
    k_levels: tuple[int, ...] = (5, 10)
    train_services: int = 500
    eval_services: int = 100
    curve_services: int = 30
    workload_path: str = ""
    brokers: int = 2
    iterations: int = 200
    n_steps: int = 64
    executor: str = "inline"
    fc: tuple[int, ...] = (128, 128)
    hidden: int = 64
    enable_lstm: bool = True
    enable_per: bool = True
    mask_actions: bool = False
    violation_bonus: float = 1.0
    eval_every: int = 10
    threshold_factor: float = 0.6
    learner: LearnerConfig = field(default_factory=LearnerConfig)

    def __post_init__(self):
        self.env_config()  # objective weights
        if self.brokers < 1:
            raise ConfigError("brokers must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.executor not in EXECUTORS:
            raise ConfigError(f"executor must be one of {EXECUTORS}")
        if len(self.servers) != 3 or min(self.servers) < 0 or sum(self.servers) < 1:
            raise ConfigError("servers must be three non-negative tier counts with at least one server")
        if not self.k_levels or min(self.k_levels) < 1:
            raise ConfigError("k_levels must be positive")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        BrokerConfig(n_steps=self.n_steps)

    def env_config(self) -> EnvConfig:
        return EnvConfig(alpha=self.alpha, beta=self.beta, mask_actions=self.mask_actions)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_mapping(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        """Build from a flat mapping; a nested ``learner`` table holds learner keys."""
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw: dict[str, Any] = {}
        for k, v in d.items():
            if k == "learner":
                lnames = {f.name for f in fields(LearnerConfig)}
                bad = set(v) - lnames
                if bad:
                    raise ConfigError(f"unknown learner keys: {sorted(bad)}")
                kw[k] = LearnerConfig(**v)
            elif k == "servers" and isinstance(v, Mapping):
                kw[k] = tuple(int(v.get(t, 0)) for t in TIERS)
            elif isinstance(v, list):
                kw[k] = tuple(v)
            else:
                kw[k] = v
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_mapping(data)

    def override(self, **kw) -> "ExperimentConfig":
        lkw = {k[len("learner."):]: v for k, v in kw.items() if k.startswith("learner.")}
        kw = {k: v for k, v in kw.items() if not k.startswith("learner.") and v is not None}
        if lkw:
            kw["learner"] = replace(self.learner, **lkw)
        return replace(self, **kw)


def toy_config(**kw) -> ExperimentConfig:
    """The desk-scale setup: 25 servers, K in {5, 10}, two brokers."""
    base = ExperimentConfig(servers=(4, 8, 13), fc=(64, 64), hidden=32, train_services=400,
                            eval_services=100, curve_services=30, iterations=200, brokers=2)
    return base.override(**kw)


# -- world ---------------------------------------------------------------------

@dataclass
class World:
    catalog: SecurityCatalog
    infra: Infrastructure
    fleet: Fleet
    train: list[ServiceDag]
    held_out: list[ServiceDag]
    curve: list[ServiceDag]
    env_config: EnvConfig


def _seeds(seed: int, n: int) -> list[int]:
    return [int(x) for x in np.random.SeedSequence(seed).generate_state(n)]


def build_world(cfg: ExperimentConfig) -> World:
    s_infra, s_train, s_eval, s_curve = _seeds(cfg.seed, 4)
    catalog = SecurityCatalog.default()
    if cfg.infra_path:
        infra = Infrastructure.load(cfg.infra_path)
    else:
        infra = generate_infrastructure(cfg.servers, cfg.area_m, seed=s_infra, catalog=catalog,
                                        cnf_mode=cfg.cnf_mode)
    if cfg.workload_path:
        pool = load_services(cfg.workload_path)
        held = pool[: cfg.eval_services]
        train = pool[cfg.eval_services:] or pool
        curve = held[: cfg.curve_services]
    else:
        train = ServiceGenerator(cfg.k_levels, seed=s_train, prefix="train").take(cfg.train_services)
        held = ServiceGenerator(cfg.k_levels, seed=s_eval, prefix="eval").take(cfg.eval_services)
        curve = ServiceGenerator(cfg.k_levels, seed=s_curve, prefix="val").take(cfg.curve_services)
    return World(catalog, infra, Fleet(infra, catalog), train, held, curve, cfg.env_config())


def net_shapes(cfg: ExperimentConfig, fleet: Fleet) -> tuple[NetShape, NetShape]:
    D, R = fleet.state_dim, fleet.R
    return (NetShape(D, R, cfg.fc, cfg.hidden, cfg.enable_lstm),
            NetShape(D, 1, cfg.fc, cfg.hidden, cfg.enable_lstm))


def make_learner(cfg: ExperimentConfig, fleet: Fleet) -> Learner:
    a, c = net_shapes(cfg, fleet)
    s_learn = _seeds(cfg.seed, 5)[4]
    lcfg = replace(cfg.learner, mask_actions=cfg.mask_actions)
    return Learner(a, c, lcfg, seed=s_learn, enable_per=cfg.enable_per,
                   total_iterations=cfg.iterations)


def make_broker(cfg: ExperimentConfig, world: World, broker_id: int, snapshot: PolicySnapshot) -> Broker:
    bc = BrokerConfig(broker_id=broker_id, n_steps=cfg.n_steps, violation_bonus=cfg.violation_bonus,
                      reward_transform=cfg.learner.reward_transform)
    return Broker(bc, world.fleet, world.env_config, world.train, snapshot, seed=cfg.seed)


# -- policies and rollouts ----------------------------------------------------

class Policy:
    name = "policy"

    def reset(self) -> None:
        pass

    def act(self, env: PlacementEnv) -> int:
        raise NotImplementedError


class ActorPolicy(Policy):
    name = "actor"

    def __init__(self, net: RecurrentNet):
        self.net = net
        self.reset()

    def reset(self) -> None:
        self.rec = self.net.initial_state()

    def act(self, env: PlacementEnv) -> int:
        a, _, self.rec = decision_engine(env.state(), self.rec, self.net, ARGMAX)
        return a


class RandomPolicy(Policy):
    name = "random"

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def act(self, env: PlacementEnv) -> int:
        return int(self.rng.integers(env.R))


class GreedyLatency(Policy):
    """Per-task earliest completion; ties to the lowest server id."""

    name = "greedy_latency"

    def act(self, env: PlacementEnv) -> int:
        comp, wait = env.candidate_times()
        return int(np.argmin(comp + wait))


class GreedySecurity(Policy):
    """Per-task best security score, then earliest completion, then lowest id."""

    name = "greedy_security"

    def act(self, env: PlacementEnv) -> int:
        comp, wait = env.candidate_times()
        score = env.scores[env.current_task]
        order = np.lexsort((np.arange(env.R), comp + wait, -score))
        return int(order[0])


REFERENCE_POLICIES: dict[str, Callable[[int], Policy]] = {
    "random": lambda seed: RandomPolicy(seed),
    "greedy_latency": lambda seed: GreedyLatency(),
    "greedy_security": lambda seed: GreedySecurity(),
}


def reference_policy(kind: str, seed: int = 0) -> Policy:
    if kind not in REFERENCE_POLICIES:
        raise ConfigError(f"unknown reference policy {kind!r}; choose from {sorted(REFERENCE_POLICIES)}")
    return REFERENCE_POLICIES[kind](seed)


def rollout(env: PlacementEnv, policy: Policy) -> EpisodeSummary:
    env.reset()
    policy.reset()
    while not env.done:
        env.step(policy.act(env))
    return env.summary()


@dataclass(frozen=True)
class EvalSummary:
    policy: str
    services: int
    mean_response_time_ms: float
    mean_security_score: float
    mean_weighted_cost: float
    violation_rate: float
    security_violation_rate: float
    deadline_violation_rate: float
    capacity_violation_rate: float

    CSV_FIELDS = ("policy", "services", "mean_response_time_ms", "mean_security_score",
                  "mean_weighted_cost", "violation_rate", "security_violation_rate",
                  "deadline_violation_rate", "capacity_violation_rate")

    def row(self) -> dict:
        return {k: getattr(self, k) for k in self.CSV_FIELDS}


def summarize(name: str, rows: Sequence[EpisodeSummary]) -> EvalSummary:
    tasks = sum(r.tasks for r in rows)
    return EvalSummary(
        name, len(rows),
        float(np.mean([r.response_time_ms for r in rows])),
        float(np.mean([r.security_score for r in rows])),
        float(np.mean([r.weighted_cost for r in rows])),
        sum(r.violating_tasks for r in rows) / tasks,
        sum(r.security_violations for r in rows) / tasks,
        sum(r.deadline_violations for r in rows) / tasks,
        sum(r.capacity_violations for r in rows) / tasks,
    )


def evaluate_policy(policy: Policy, services: Iterable[ServiceDag], fleet: Fleet,
                    env_config: EnvConfig = EnvConfig(), envs: dict | None = None
                    ) -> tuple[list[EpisodeSummary], EvalSummary]:
    rows = []
    for dag in services:
        env = envs.get(dag.id) if envs is not None else None
        if env is None:
            env = PlacementEnv(dag, fleet, env_config)
            if envs is not None:
                envs[dag.id] = env
        rows.append(rollout(env, policy))
    return rows, summarize(policy.name, rows)


@dataclass
class EvalResult:
    rows: dict[str, list[EpisodeSummary]]
    summaries: dict[str, EvalSummary]


def evaluate(checkpoint: str | Path, services: Sequence[ServiceDag], fleet: Fleet,
             env_config: EnvConfig = EnvConfig(), references: Sequence[str] = ("random",),
             seed: int = 0) -> EvalResult:
    """Argmax rollouts of a saved actor, paired with reference policies on the same services."""
    nets, _ = load_checkpoint(checkpoint)
    if "actor" not in nets:
        raise CheckpointError("checkpoint has no actor network")
    actor = nets["actor"]
    if actor.shape.obs_dim != fleet.state_dim or actor.shape.out_dim != fleet.R:
        raise CheckpointError(f"checkpoint expects state size {actor.shape.obs_dim} and "
                              f"{actor.shape.out_dim} servers; fleet has {fleet.state_dim} and {fleet.R}")
    envs: dict = {}
    rows, sums = {}, {}
    for pol in [ActorPolicy(actor)] + [reference_policy(k, seed) for k in references]:
        rows[pol.name], sums[pol.name] = evaluate_policy(pol, services, fleet, env_config, envs)
    return EvalResult(rows, sums)


# -- training ------------------------------------------------------------------

@dataclass
class TrainResult:
    learner: Learner
    metrics: list[dict]
    curve: list[tuple[int, float]]
    emitted: int
    ingested: int
    versions_seen: dict[int, list[int]]
    env_steps: int
    wall_seconds: float
    checkpoint: Path | None = None
    train_curve: list[tuple[int, list[float]]] = field(default_factory=list)


def save_learner_checkpoint(path: str | Path, learner: Learner, cfg: ExperimentConfig) -> None:
    meta = {"iteration": learner.iteration, "version": learner.version, "updates": learner.updates,
            "config": cfg.to_dict()}
    save_checkpoint(path, {"actor": learner.actor, "critic": learner.critic}, meta)


def write_csv(path: str | Path, rows: Iterable[Mapping], fieldnames: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fieldnames), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


class _Tracker:
    """Per-iteration bookkeeping shared by both executors."""

    def __init__(self, cfg: ExperimentConfig, world: World, learner: Learner):
        self.cfg, self.world, self.learner = cfg, world, learner
        self.metrics: list[dict] = []
        self.curve: list[tuple[int, float]] = []
        self.envs: dict = {}
        self.env_steps = 0
        self.episodes: list[EpisodeSummary] = []
        self.emitted = 0
        self.rates: list[float] = []
        self.train_curve: list[tuple[int, list[float]]] = []
        self._seen = 0
        self.eval_row: dict = {}
        self.maybe_eval(force=True)

    def batch(self, b) -> None:
        self.learner.ingest(b.transitions)
        self.env_steps += len(b.transitions)
        self.episodes.extend(b.episodes)
        self.rates.append(b.steps_per_sec)

    def maybe_eval(self, force: bool = False) -> None:
        it = self.learner.iteration
        if not self.world.curve or not (force or it % self.cfg.eval_every == 0):
            self.eval_row = {}
            return
        _, s = evaluate_policy(ActorPolicy(self.learner.actor), self.world.curve, self.world.fleet,
                               self.world.env_config, self.envs)
        self.curve.append((it, s.mean_weighted_cost))
        self.eval_row = {"eval_weighted_cost": s.mean_weighted_cost,
                         "eval_response_time_ms": s.mean_response_time_ms,
                         "eval_security_score": s.mean_security_score,
                         "eval_violation_rate": s.violation_rate}

    def iteration(self, m: dict) -> None:
        self.maybe_eval()
        row = dict(m)
        row["env_steps"] = self.env_steps
        row["episodes"] = len(self.episodes)
        row["steps_per_sec"] = float(np.mean(self.rates)) if self.rates else 0.0
        fresh = self.episodes[self._seen:]
        self._seen = len(self.episodes)
        self.train_curve.append((self.learner.iteration, [e.weighted_cost for e in fresh]))
        recent = self.episodes[-50:]
        row["train_weighted_cost"] = float(np.mean([e.weighted_cost for e in recent])) if recent else ""
        row.update(self.eval_row)
        self.rates = []
        self.metrics.append(row)


def train(cfg: ExperimentConfig, out_dir: str | Path | None = None, world: World | None = None,
          progress: Callable[[dict], None] | None = None) -> TrainResult:
    world = world or build_world(cfg)
    learner = make_learner(cfg, world.fleet)
    t0 = time.perf_counter()
    if cfg.executor == "process" and cfg.iterations > 0:
        tr = _train_process(cfg, world, learner, progress)
    else:
        tr = _train_inline(cfg, world, learner, progress)
    tr.wall_seconds = time.perf_counter() - t0
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        tr.checkpoint = out / "checkpoint.zip"
        save_learner_checkpoint(tr.checkpoint, learner, cfg)
        write_csv(out / "metrics.csv", tr.metrics, TRAIN_FIELDS)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    return tr


def _train_inline(cfg, world, learner, progress) -> TrainResult:
    """Deterministic round-robin: each broker runs one epoch, then the learner iterates."""
    brokers = [make_broker(cfg, world, b, learner.snapshot()) for b in range(cfg.brokers)]
    track = _Tracker(cfg, world, learner)
    emitted = 0
    while learner.iteration < cfg.iterations:
        snap = learner.snapshot()
        for br in brokers:
            b = br.run_epoch(snap)
            emitted += len(b)
            track.batch(b)
        m = learner.learn_iteration()
        if m is not None:
            track.iteration(m)
            if progress:
                progress(track.metrics[-1])
    return TrainResult(learner, track.metrics, track.curve, emitted, learner.ingested,
                       {br.config.broker_id: br.versions_seen for br in brokers}, track.env_steps, 0.0,
                       train_curve=track.train_curve)


def _broker_worker(cfg: ExperimentConfig, world: World, broker_id: int, snapshot: PolicySnapshot,
                   snap_q, batch_q, stop) -> None:
    br = make_broker(cfg, world, broker_id, snapshot)
    emitted = 0
    while not stop.is_set():
        latest = None
        try:
            while True:
                latest = snap_q.get_nowait()
        except queue.Empty:
            pass
        b = br.run_epoch(latest)
        emitted += len(b)
        while True:
            try:
                batch_q.put(b, timeout=0.1)
                break
            except queue.Full:
                continue
    batch_q.put(("done", broker_id, emitted, br.versions_seen))


def _mp_context():
    methods = mp.get_all_start_methods()
    return mp.get_context("fork" if "fork" in methods else "spawn")


def _train_process(cfg, world, learner, progress, until_steps: int | None = None) -> TrainResult:
    """Brokers in worker processes; the learner consumes batches as they arrive."""
    ctx = _mp_context()
    batch_q = ctx.Queue(maxsize=SUBMIT_QUEUE)
    stop = ctx.Event()
    snap_qs = [ctx.Queue() for _ in range(cfg.brokers)]
    snap = learner.snapshot()
    procs = [ctx.Process(target=_broker_worker, args=(cfg, world, b, snap, snap_qs[b], batch_q, stop),
                         daemon=True) for b in range(cfg.brokers)]
    t_start = time.perf_counter()
    for p in procs:
        p.start()
    track = _Tracker(cfg, world, learner)

    def done() -> bool:
        if until_steps is not None:
            return track.env_steps >= until_steps
        return learner.iteration >= cfg.iterations

    try:
        while not done():
            items = [batch_q.get()]
            try:
                while True:
                    items.append(batch_q.get_nowait())
            except queue.Empty:
                pass
            for b in items:
                track.batch(b)
            m = learner.learn_iteration()
            if m is not None:
                track.iteration(m)
                snap = learner.snapshot()
                for q in snap_qs:
                    q.put(snap)
                if progress:
                    progress(track.metrics[-1])
    finally:
        stop.set()
    elapsed = time.perf_counter() - t_start
    emitted, versions, finished = 0, {}, 0
    while finished < cfg.brokers:
        item = batch_q.get()
        if isinstance(item, tuple):
            _, bid, n, seen = item
            emitted += n
            versions[bid] = seen
            finished += 1
        else:
            track.batch(item)
    for p in procs:
        p.join()
    for q in snap_qs:
        # unread snapshots would otherwise block interpreter exit
        q.cancel_join_thread()
        q.close()
    return TrainResult(learner, track.metrics, track.curve, emitted, learner.ingested, versions,
                       track.env_steps, elapsed, train_curve=track.train_curve)


def iterations_to_threshold(curve: Sequence[tuple[int, float]], threshold: float, budget: int) -> int:
    """First evaluated iteration at or below ``threshold``; ``budget + 1`` if never reached."""
    for it, w in curve:
        if w <= threshold:
            return it
    return budget + 1


def smoothed_curve(train_curve: Sequence[tuple[int, list[float]]], window: int = 10
                   ) -> list[tuple[int, float]]:
    """Mean episode cost over the trailing ``window`` iterations."""
    out = []
    for n, (it, _) in enumerate(train_curve):
        ws = [w for _, chunk in train_curve[max(0, n - window + 1):n + 1] for w in chunk]
        if ws:
            out.append((it, float(np.mean(ws))))
    return out


def reference_threshold(cfg: ExperimentConfig, world: World) -> float:
    _, s = evaluate_policy(RandomPolicy(cfg.seed), world.curve, world.fleet, world.env_config)
    return cfg.threshold_factor * s.mean_weighted_cost


# -- speedup -------------------------------------------------------------------

@dataclass(frozen=True)
class SpeedupRow:
    workers: int
    env_steps: int
    seconds: float
    speedup: float

    CSV_FIELDS = ("workers", "env_steps", "seconds", "speedup")


def time_to_steps(cfg: ExperimentConfig, workers: int, target_steps: int, world: World | None = None) -> tuple[float, int]:
    if target_steps < 1:
        raise ConfigError("target steps must be >= 1")
    c = cfg.override(brokers=workers, executor="process", iterations=10**9)
    world = world or build_world(c)
    learner = make_learner(c, world.fleet)
    tr = _train_process(c, world, learner, None, until_steps=target_steps)
    return tr.wall_seconds, tr.env_steps


def bench_speedup(cfg: ExperimentConfig, workers: Sequence[int] = (1, 2, 4), target_steps: int = 150_000,
                  progress: Callable[[SpeedupRow], None] | None = None) -> list[SpeedupRow]:
    """SP = time for one broker to reach ``target_steps`` / time for ``n`` brokers."""
    world = build_world(cfg)
    base_t, base_n = time_to_steps(cfg, 1, target_steps, world)
    rows = []
    for w in workers:
        t, n = (base_t, base_n) if w == 1 else time_to_steps(cfg, w, target_steps, world)
        row = SpeedupRow(w, n, t, base_t / t if t > 0 else math.nan)
        rows.append(row)
        if progress:
            progress(row)
    return rows
