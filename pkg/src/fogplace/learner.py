"""Central learner: clipped-ratio TD errors, truncated trace advantages,
clipped policy surrogate, critic regression and priority refresh."""

from __future__ import annotations

import math
from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

from .environment import mask_from_state
from .errors import ConfigError
from .neuronet import Adam, NetShape, RecurrentNet, log_softmax
from .replay import PriorityBuffer, SampleBatch, Transition

MU_FLOOR = 1e-12

METRIC_FIELDS = ("iteration", "updates", "mean_reward", "policy_loss", "value_loss", "mean_abs_td", "mean_ratio",
                 "mean_is_weight", "snapshot_version", "buffer_size", "max_priority", "mu_clamped")


@dataclass(frozen=True)
class LearnerConfig:
    gamma: float = 0.9
    trace_decay: float = 0.95
    rho_bar: float = 1.0
    c_bar: float = 1.0
    clip_eta: float = 0.2
    horizon: int = 8
    lr_actor: float = 0.01
    lr_critic: float = 0.01
    batch_size: int = 128
    gradient_steps: int = 2
    buffer_size: int = 10_000
    entropy_coef: float = 0.0
    reward_transform: str = "symlog"
    mask_actions: bool = False
    per_nu: float = 0.6
    per_iota: float = 0.4
    per_iota_final: float = 1.0
    per_eps: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if not 0.0 < self.clip_eta < 1.0:
            raise ConfigError("clip_eta must lie in (0, 1)")
        if self.horizon < 1 or self.batch_size < 1 or self.gradient_steps < 1:
            raise ConfigError("horizon, batch_size and gradient_steps must be >= 1")
        if self.reward_transform not in ("symlog", "none"):
            raise ConfigError(f"unknown reward transform {self.reward_transform!r}")


def transform_reward(r, kind: str = "symlog"):
    r = np.asarray(r, dtype=float)
    if kind == "none":
        return r
    return np.sign(r) * np.log1p(np.abs(r))


# -- scalar pieces (vectorized over arbitrary leading shapes) --------------------

def importance_ratio(logp_pi, logp_mu, floor: float = MU_FLOOR):
    """pi/mu evaluated in log space; returns (ratio, number of clamped mu values)."""
    logp_mu = np.asarray(logp_mu, dtype=float)
    lo = math.log(floor)
    clamped = int(np.sum(logp_mu < lo))
    return np.exp(np.asarray(logp_pi) - np.maximum(logp_mu, lo)), clamped


def corrected_td(reward, value, next_value, done, ratio, gamma: float, rho_bar: float):
    rho = np.minimum(rho_bar, ratio)
    return rho * (reward + gamma * next_value * (1.0 - np.asarray(done, dtype=float)) - value)


def advantage(psi: Sequence[float], ratio: Sequence[float], gamma: float, trace_decay: float,
              c_bar: float, horizon: int) -> np.ndarray:
    """Truncated importance-weighted sum of TD errors for one ordered segment.

    ``adv[j] = sum_{k<H} (tau*gamma)^k * prod_{l<k} min(c_bar, ratio[j+l]) * psi[j+k]``,
    stopping at the end of the segment.
    """
    psi = np.asarray(psi, dtype=float)
    sig = np.minimum(c_bar, np.asarray(ratio, dtype=float))
    n = len(psi)
    out = np.zeros(n)
    decay = trace_decay * gamma
    for j in range(n):
        acc, coef = 0.0, 1.0
        for k in range(min(horizon, n - j)):
            acc += coef * psi[j + k]
            coef *= decay * sig[j + k]
        out[j] = acc
    return out


def advantage_recursive(psi: np.ndarray, ratio: np.ndarray, mask: np.ndarray, gamma: float,
                        trace_decay: float, c_bar: float) -> np.ndarray:
    """Batched form for time-major ``(L, B)`` arrays; ``mask`` marks valid steps."""
    sig = np.minimum(c_bar, ratio)
    out = np.zeros_like(psi)
    nxt = np.zeros(psi.shape[1])
    for k in range(psi.shape[0] - 1, -1, -1):
        nxt = mask[k] * (psi[k] + trace_decay * gamma * sig[k] * nxt)
        out[k] = nxt
    return out


def clipped_surrogate(ratio, adv, eta: float):
    """Per-sample surrogate and its derivative with respect to the ratio."""
    ratio = np.asarray(ratio, dtype=float)
    adv = np.asarray(adv, dtype=float)
    clipped = np.clip(ratio, 1.0 - eta, 1.0 + eta)
    a, b = ratio * adv, clipped * adv
    surr = np.minimum(a, b)
    # the unclipped branch is active unless the clipped product is strictly smaller
    dsurr = np.where(b < a, 0.0, adv)
    return surr, dsurr


# -- snapshots ---------------------------------------------------------------------

@dataclass(frozen=True)
class PolicySnapshot:
    version: int
    shape: NetShape
    params: Mapping[str, np.ndarray]

    @classmethod
    def of(cls, net: RecurrentNet, version: int) -> "PolicySnapshot":
        frozen = {}
        for k, v in net.params.items():
            a = v.copy()
            a.setflags(write=False)
            frozen[k] = a
        return cls(version, net.shape, MappingProxyType(frozen))

    def __reduce__(self):
        return (_restore_snapshot, (self.version, self.shape, {k: np.array(v) for k, v in self.params.items()}))

    def network(self) -> RecurrentNet:
        return RecurrentNet(self.shape, {k: np.array(v) for k, v in self.params.items()})


def _restore_snapshot(version: int, shape: NetShape, params: dict) -> PolicySnapshot:
    return PolicySnapshot.of(RecurrentNet(shape, params), version)


# -- segment assembly ------------------------------------------------------------

@dataclass
class SegmentBatch:
    """Padded time-major tensors for one sampled batch.

    The actor replays each segment from its stored recurrent snapshot; the
    critic replays the resident episode prefix so its hidden state carries the
    same history, then one extra step for the bootstrap state.
    """

    actor_x: np.ndarray  # (La, B, D)
    actor_h0: np.ndarray
    actor_c0: np.ndarray
    mask: np.ndarray  # (La, B)
    actions: np.ndarray  # (La, B)
    logp_mu: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    critic_x: np.ndarray  # (Lc, B, D)
    offset: np.ndarray  # (B,) critic position of segment step 0
    lengths: np.ndarray  # (B,)
    weights: np.ndarray  # (B,)
    slots: np.ndarray
    generations: np.ndarray


def build_segments(buffer: PriorityBuffer, batch: SampleBatch, horizon: int, hidden: int,
                   replay_prefix: bool = True) -> SegmentBatch:
    segs, prefixes = [], []
    for tr in batch.transitions:
        seg = [tr]
        while len(seg) < horizon and not seg[-1].done:
            s = buffer.lookup(tr.episode, seg[-1].t + 1)
            if s is None:
                break
            seg.append(buffer.data[s])
        pre = []
        if replay_prefix:
            t = tr.t - 1
            while t >= 0:
                s = buffer.lookup(tr.episode, t)
                if s is None:
                    break
                pre.append(buffer.data[s])
                t -= 1
            pre.reverse()
        segs.append(seg)
        prefixes.append(pre)
    B = len(segs)
    D = segs[0][0].state.shape[0]
    La = max(len(s) for s in segs)
    Lc = max(len(p) + len(s) + 1 for p, s in zip(prefixes, segs))
    actor_x = np.zeros((La, B, D))
    critic_x = np.zeros((Lc, B, D))
    mask = np.zeros((La, B))
    actions = np.zeros((La, B), dtype=np.int64)
    logp_mu = np.zeros((La, B))
    rewards = np.zeros((La, B))
    dones = np.zeros((La, B))
    h0 = np.zeros((B, hidden))
    c0 = np.zeros((B, hidden))
    offset = np.zeros(B, dtype=np.int64)
    lengths = np.zeros(B, dtype=np.int64)
    for b, (pre, seg) in enumerate(zip(prefixes, segs)):
        n = len(seg)
        lengths[b] = n
        offset[b] = len(pre)
        if hidden and seg[0].actor_h is not None:
            h0[b] = seg[0].actor_h
            c0[b] = seg[0].actor_c
        for k, tr in enumerate(seg):
            actor_x[k, b] = tr.state
            mask[k, b] = 1.0
            actions[k, b] = tr.action
            logp_mu[k, b] = tr.logp_mu
            rewards[k, b] = tr.reward
            dones[k, b] = float(tr.done)
        for k, tr in enumerate(pre):
            critic_x[k, b] = tr.state
        critic_x[len(pre):len(pre) + n, b] = actor_x[:n, b]
        if not seg[-1].done:
            critic_x[len(pre) + n, b] = seg[-1].next_state
    gens = buffer.generation[batch.indices].copy()
    return SegmentBatch(actor_x, h0, c0, mask, actions, logp_mu, rewards, dones, critic_x,
                        offset, lengths, batch.weights.copy(), batch.indices.copy(), gens)


@dataclass
class LossOutput:
    actor_grads: dict[str, np.ndarray]
    critic_grads: dict[str, np.ndarray]
    policy_loss: float
    value_loss: float
    ratio: np.ndarray  # (La, B)
    psi: np.ndarray
    adv: np.ndarray
    values: np.ndarray
    next_values: np.ndarray
    targets: np.ndarray
    logp: np.ndarray
    mu_clamped: int
    weights: np.ndarray | None = None
    mean_reward: float = 0.0


def segment_loss(actor: RecurrentNet, critic: RecurrentNet, sb: SegmentBatch, cfg: LearnerConfig,
                 ) -> LossOutput:
    """Forward both networks over the batch and return exact gradients.

    Policy gradients are those of ``-mean(w * surrogate)``; critic gradients of
    ``mean(w * (V - target)^2) / 2``; both are descent directions.
    """
    La, B = sb.mask.shape
    n_valid = sb.mask.sum()
    logits, a_tape, _ = actor.forward(sb.actor_x, sb.actor_h0 if actor.shape.recurrent else None,
                                      sb.actor_c0 if actor.shape.recurrent else None)
    if cfg.mask_actions:
        logits = np.where(mask_from_state(sb.actor_x, logits.shape[-1]), logits, -np.inf)
    logp_all = log_softmax(logits)
    cols = np.arange(B)
    logp = np.zeros((La, B))
    for k in range(La):
        logp[k] = logp_all[k, cols, sb.actions[k]]
    ratio, clamped = importance_ratio(logp, sb.logp_mu)
    ratio = ratio * sb.mask + (1.0 - sb.mask)

    vout, c_tape, _ = critic.forward(sb.critic_x)
    v_all = vout[..., 0]  # (Lc, B)
    values = np.zeros((La, B))
    next_values = np.zeros((La, B))
    for b in range(B):
        o, n = sb.offset[b], sb.lengths[b]
        values[:n, b] = v_all[o:o + n, b]
        next_values[:n, b] = v_all[o + 1:o + n + 1, b]
    r = transform_reward(sb.rewards, cfg.reward_transform)
    psi = corrected_td(r, values, next_values, sb.dones, ratio, cfg.gamma, cfg.rho_bar) * sb.mask
    adv = advantage_recursive(psi, ratio, sb.mask, cfg.gamma, cfg.trace_decay, cfg.c_bar)
    targets = values + adv

    w = sb.weights[None, :] * sb.mask / n_valid
    surr, dsurr = clipped_surrogate(ratio, adv, cfg.clip_eta)
    policy_loss = -float((w * surr).sum())
    # d(-w*surr)/dlogits = -w * dsurr * ratio * (onehot - pi)
    pi = np.exp(logp_all)
    logp_all = np.where(pi > 0, logp_all, 0.0)  # masked entries contribute nothing
    coef = -(w * dsurr * ratio)
    dlogits = -coef[..., None] * pi
    for k in range(La):
        dlogits[k, cols, sb.actions[k]] += coef[k]
    if cfg.entropy_coef:
        ent = -(pi * logp_all).sum(-1, keepdims=True)
        # minimizing -c * H: dH/dlogits = -pi * (logp + H)
        dlogits += cfg.entropy_coef * (w[..., None] * pi * (logp_all + ent))
        policy_loss -= cfg.entropy_coef * float((w * ent[..., 0]).sum())
    actor_grads, _ = actor.backward(a_tape, dlogits)

    err = values - targets
    value_loss = 0.5 * float((w * err * err).sum())
    dv = np.zeros_like(v_all)
    for b in range(B):
        o, n = sb.offset[b], sb.lengths[b]
        dv[o:o + n, b] = (w * err)[:n, b]
    critic_grads, _ = critic.backward(c_tape, dv[..., None])
    return LossOutput(actor_grads, critic_grads, policy_loss, value_loss, ratio, psi, adv,
                      values, next_values, targets, logp, clamped)


class Learner:
    """Owns the replay buffer, both networks and their optimizers."""

    def __init__(self, actor_shape: NetShape, critic_shape: NetShape, cfg: LearnerConfig = LearnerConfig(),
                 seed: int = 0, enable_per: bool = True, actor: RecurrentNet | None = None,
                 critic: RecurrentNet | None = None, total_iterations: int | None = None):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        s_actor, s_critic, s_buf = (int(x) for x in rng.integers(0, 2**31, size=3))
        self.actor = actor or RecurrentNet(actor_shape, seed=s_actor)
        self.critic = critic or RecurrentNet(critic_shape, seed=s_critic)
        self.actor_opt = Adam(self.actor.params, lr=cfg.lr_actor)
        self.critic_opt = Adam(self.critic.params, lr=cfg.lr_critic)
        self.enable_per = enable_per
        nu, iota = (cfg.per_nu, cfg.per_iota) if enable_per else (0.0, 0.0)
        self.buffer = PriorityBuffer(cfg.buffer_size, nu=nu, iota=iota, eps=cfg.per_eps, seed=s_buf)
        self.version = 0
        self.iteration = 0
        self.updates = 0
        self.ingested = 0
        self.total_iterations = total_iterations

    def snapshot(self) -> PolicySnapshot:
        return PolicySnapshot.of(self.actor, self.version)

    def ingest(self, transitions: Sequence[Transition]) -> None:
        self.buffer.extend(transitions)
        self.ingested += len(transitions)

    def _anneal(self) -> None:
        if not self.enable_per or not self.total_iterations:
            return
        frac = min(1.0, self.iteration / max(1, self.total_iterations - 1))
        self.buffer.iota = self.cfg.per_iota + (self.cfg.per_iota_final - self.cfg.per_iota) * frac

    def gradient_step(self) -> LossOutput | None:
        batch = self.buffer.sample(self.cfg.batch_size)
        if batch is None:
            return None
        sb = build_segments(self.buffer, batch, self.cfg.horizon, self.actor.hidden,
                            replay_prefix=self.critic.shape.recurrent)
        out = segment_loss(self.actor, self.critic, sb, self.cfg)
        self.actor_opt.step(self.actor.params, out.actor_grads)
        self.critic_opt.step(self.critic.params, out.critic_grads)
        self.buffer.update_priorities(sb.slots, out.psi[0], sb.generations)
        self.updates += 1
        out.weights = sb.weights
        out.mean_reward = float(sb.rewards[0].mean())
        return out

    def learn_iteration(self) -> dict | None:
        """One outer loop: ``gradient_steps`` updates then a new snapshot version.

        Returns ``None`` (and changes nothing) while the buffer is underfilled.
        """
        if not self.buffer.ready(self.cfg.batch_size):
            return None
        self._anneal()
        rows = [self.gradient_step() for _ in range(self.cfg.gradient_steps)]
        self.iteration += 1
        self.version += 1
        stats = self.buffer.stats()
        m = {
            "iteration": self.iteration,
            "updates": self.updates,
            "mean_reward": float(np.mean([r.mean_reward for r in rows])),
            "policy_loss": float(np.mean([r.policy_loss for r in rows])),
            "value_loss": float(np.mean([r.value_loss for r in rows])),
            "mean_abs_td": float(np.mean([np.abs(r.psi[0]).mean() for r in rows])),
            "mean_ratio": float(np.mean([r.ratio[0].mean() for r in rows])),
            "mean_is_weight": float(np.mean([r.weights.mean() for r in rows])),
            "snapshot_version": self.version,
            "buffer_size": stats["buffer_size"],
            "max_priority": stats["max_priority"],
            "mu_clamped": int(sum(r.mu_clamped for r in rows)),
        }
        return m
