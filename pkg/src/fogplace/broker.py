"""Episode-running brokers: local policy inference, reward evaluation and
experience shipment to the learner."""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .environment import EnvConfig, EpisodeSummary, Fleet, PlacementEnv, mask_from_state
from .errors import ConfigError
from .learner import PolicySnapshot, transform_reward
from .neuronet import RecurrentNet, log_softmax
from .replay import Transition
from .workload import ServiceDag, ServiceGenerator

SAMPLE, ARGMAX = "sample", "argmax"


@dataclass(frozen=True)
class BrokerConfig:
    broker_id: int = 0
    n_steps: int = 64
    mode: str = SAMPLE
    priority_eps: float = 0.01
    violation_bonus: float = 1.0
    reward_transform: str = "symlog"

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if self.mode not in (SAMPLE, ARGMAX):
            raise ConfigError(f"unknown exploration mode {self.mode!r}")


@dataclass
class ExperienceBatch:
    broker_id: int
    transitions: list[Transition]
    versions: tuple[int, ...]  # snapshot versions used, in order
    episodes: list[EpisodeSummary] = field(default_factory=list)
    steps_per_sec: float = 0.0

    def __len__(self) -> int:
        return len(self.transitions)


def broker_seed(seed: int, broker_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(broker_id)])


def decision_engine(state: np.ndarray, rec: tuple[np.ndarray, np.ndarray], net: RecurrentNet,
                    mode: str = SAMPLE, rng: np.random.Generator | None = None,
                    mask: np.ndarray | None = None) -> tuple[int, float, tuple[np.ndarray, np.ndarray]]:
    """Pick a server; returns (action, log mu(action), next recurrent state).

    Argmax ties resolve to the lowest server id. ``mask`` removes servers from
    the distribution before sampling.
    """
    logits, rec = net.step(state, rec)
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    logp = log_softmax(logits)
    if mode == ARGMAX:
        a = int(np.argmax(logp))
    else:
        cdf = np.cumsum(np.exp(logp))
        a = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        a = min(a, len(cdf) - 1)
    return a, float(logp[a]), rec


class RequestQueue:
    """Service requests served in a per-broker shuffled order; refilled on empty."""

    def __init__(self, pool: Sequence[ServiceDag], rng: np.random.Generator,
                 generator: ServiceGenerator | None = None):
        self.pool = list(pool)
        self.rng = rng
        self.generator = generator
        self.queue: deque[ServiceDag] = deque()
        self.refills = 0

    def next(self) -> ServiceDag:
        if not self.queue:
            self.refills += 1
            if self.pool:
                self.queue.extend(self.pool[i] for i in self.rng.permutation(len(self.pool)))
            else:
                if self.generator is None:
                    self.generator = ServiceGenerator(seed=int(self.rng.integers(2**31)))
                self.queue.append(next(iter(self.generator)))
        return self.queue.popleft()


class Broker:
    """Runs placement episodes with a local copy of the actor."""

    def __init__(self, config: BrokerConfig, fleet: Fleet, env_config: EnvConfig,
                 services: Sequence[ServiceDag], snapshot: PolicySnapshot, seed: int = 0):
        self.config = config
        self.fleet = fleet
        self.env_config = env_config
        ss = broker_seed(seed, config.broker_id)
        q_seed, a_seed = ss.spawn(2)
        self.requests = RequestQueue(services, np.random.default_rng(q_seed))
        self.rng = np.random.default_rng(a_seed)
        self.snapshot = snapshot
        self.net = snapshot.network()
        self.pending: PolicySnapshot | None = None
        self.env: PlacementEnv | None = None
        self.rec = self.net.initial_state()
        self.state: np.ndarray | None = None
        self.episode_no = 0
        self.total_steps = 0
        self.versions_seen = [snapshot.version]
        self._envs: dict[str, PlacementEnv] = {}

    @property
    def version(self) -> int:
        return self.snapshot.version

    @property
    def mid_episode(self) -> bool:
        return self.env is not None and not self.env.done

    def sync_policy(self, snapshot: PolicySnapshot) -> None:
        """Adopt a newer snapshot; an episode in flight keeps the old one until it ends."""
        if snapshot.version <= self.version and self.pending is None:
            return
        if self.pending is not None and snapshot.version <= self.pending.version:
            return
        if self.mid_episode:
            self.pending = snapshot
        else:
            self._apply(snapshot)

    def _apply(self, snapshot: PolicySnapshot) -> None:
        if snapshot.version <= self.version:
            self.pending = None
            return
        self.snapshot = snapshot
        self.net = snapshot.network()
        self.pending = None
        self.versions_seen.append(snapshot.version)

    def _environment(self, dag: ServiceDag) -> PlacementEnv:
        env = self._envs.get(dag.id) if dag.id else None
        if env is None or env.dag is not dag:
            env = PlacementEnv(dag, self.fleet, self.env_config)
            if dag.id:
                self._envs[dag.id] = env
        env.reset()
        return env

    def _begin_episode(self) -> None:
        if self.pending is not None:
            self._apply(self.pending)
        self.env = self._environment(self.requests.next())
        self.state = self.env.state()
        self.rec = self.net.initial_state()
        self.episode_no += 1

    def initial_priority(self, reward: float, violation: bool) -> float:
        r = float(transform_reward(reward, self.config.reward_transform))
        return abs(r) + self.config.priority_eps + (self.config.violation_bonus if violation else 0.0)

    def run_epoch(self, snapshot: PolicySnapshot | None = None) -> ExperienceBatch:
        """Exactly ``n_steps`` environment steps; episodes may straddle epochs."""
        if snapshot is not None:
            self.sync_policy(snapshot)
        cfg = self.config
        out: list[Transition] = []
        episodes: list[EpisodeSummary] = []
        versions = [self.version]
        t0 = time.perf_counter()
        for _ in range(cfg.n_steps):
            if not self.mid_episode:
                self._begin_episode()
                if versions[-1] != self.version:
                    versions.append(self.version)
            env = self.env
            h_before, c_before = self.rec
            mask = env.action_mask() if self.env_config.mask_actions else None
            if mask is not None and not mask.any():
                mask = None
            action, logp, self.rec = decision_engine(self.state, self.rec, self.net, cfg.mode, self.rng, mask)
            t = env.t
            res = env.step(action)
            info = res.info
            violation = info["deadline_violation"] or info["capacity_violation"] or info["security_violation"]
            out.append(Transition(
                state=self.state, action=action, reward=res.reward, next_state=res.state,
                done=res.done, logp_mu=logp,
                priority=self.initial_priority(res.reward, violation),
                actor_h=h_before if self.net.hidden else None,
                actor_c=c_before if self.net.hidden else None,
                episode=(cfg.broker_id, self.episode_no), t=t, service_id=env.dag.id,
                version=self.version, violation=bool(violation),
            ))
            self.state = res.state
            self.total_steps += 1
            if res.done:
                episodes.append(info["summary"])
        dt = time.perf_counter() - t0
        return ExperienceBatch(cfg.broker_id, out, tuple(versions), episodes,
                               cfg.n_steps / dt if dt > 0 else 0.0)


def replay_log_mu(batch: ExperienceBatch, snapshots: dict[int, PolicySnapshot],
                  masked: bool = False) -> np.ndarray:
    """Re-evaluate the behaviour log-probabilities of a batch from stored snapshots."""
    nets = {v: s.network() for v, s in snapshots.items()}
    out = np.empty(len(batch.transitions))
    for n, tr in enumerate(batch.transitions):
        net = nets[tr.version]
        rec = (tr.actor_h, tr.actor_c) if tr.actor_h is not None else net.initial_state()
        logits, _ = net.step(tr.state, rec)
        if masked:
            logits = np.where(mask_from_state(tr.state, net.shape.out_dim), logits, -np.inf)
        out[n] = log_softmax(logits)[tr.action]
    return out
