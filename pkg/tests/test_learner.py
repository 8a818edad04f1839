import math
import pickle

import numpy as np
import pytest

from fogplace.broker import Broker, BrokerConfig
from fogplace.environment import EnvConfig
from fogplace.errors import ConfigError
from fogplace.learner import (METRIC_FIELDS, Learner, LearnerConfig, PolicySnapshot, advantage,
                              advantage_recursive, build_segments, clipped_surrogate, corrected_td,
                              importance_ratio, segment_loss, transform_reward)
from fogplace.neuronet import NetShape, RecurrentNet, log_softmax
from fogplace.replay import Transition
from fogplace.workload import ServiceGenerator

import oracles


def small_learner(fleet, recurrent=True, **cfg):
    a = NetShape(fleet.state_dim, fleet.R, (12, 12), 6, recurrent)
    c = NetShape(fleet.state_dim, 1, (12, 12), 6, recurrent)
    base = dict(batch_size=16, buffer_size=500, horizon=4)
    base.update(cfg)
    return Learner(a, c, LearnerConfig(**base), seed=7)


def fill(learner, fleet, steps=96, broker_id=0, seed=0):
    services = ServiceGenerator((5,), seed=seed).take(10)
    br = Broker(BrokerConfig(broker_id, n_steps=steps), fleet, EnvConfig(), services, learner.snapshot(), seed)
    batch = br.run_epoch()
    learner.ingest(batch.transitions)
    return batch


def test_config_validation():
    with pytest.raises(ConfigError):
        LearnerConfig(gamma=1.5)
    with pytest.raises(ConfigError):
        LearnerConfig(clip_eta=0.0)
    with pytest.raises(ConfigError):
        LearnerConfig(horizon=0)
    with pytest.raises(ConfigError):
        LearnerConfig(reward_transform="log")


def test_transform_reward():
    assert transform_reward(0.0) == 0.0
    assert transform_reward(-1e6) == pytest.approx(-math.log1p(1e6))
    assert transform_reward(3.0, "none") == 3.0


def test_importance_ratio_clamps_tiny_mu():
    r, n = importance_ratio(np.log([0.5, 0.2]), np.log([0.25, 1e-20]))
    assert r[0] == pytest.approx(2.0)
    assert r[1] == pytest.approx(0.2 / 1e-12)
    assert n == 1


def test_corrected_td():
    psi = corrected_td(1.0, 0.5, 2.0, False, 3.0, 0.9, 1.0)
    assert psi == pytest.approx(1.0 + 0.9 * 2.0 - 0.5)
    psi = corrected_td(1.0, 0.5, 2.0, True, 0.5, 0.9, 1.0)
    assert psi == pytest.approx(0.5 * 0.5)


def test_recursive_advantage_equals_explicit_sum():
    rng = np.random.default_rng(0)
    for _ in range(50):
        L = int(rng.integers(1, 9))
        psi = rng.normal(size=L)
        ratio = rng.uniform(0.2, 2.0, L)
        explicit = advantage(psi, ratio, 0.9, 0.95, 1.0, horizon=L)
        rec = advantage_recursive(psi[:, None], ratio[:, None], np.ones((L, 1)), 0.9, 0.95, 1.0)[:, 0]
        np.testing.assert_allclose(rec, explicit, atol=1e-13)
    # horizon 1 keeps only the local term
    np.testing.assert_array_equal(advantage(psi, ratio, 0.9, 0.95, 1.0, 1), psi)


def test_clipped_surrogate_derivative():
    rng = np.random.default_rng(1)
    ratio = rng.uniform(0.5, 1.5, 200)
    adv = rng.normal(size=200)
    _, d = clipped_surrogate(ratio, adv, 0.2)
    h = 1e-7
    num = (clipped_surrogate(ratio + h, adv, 0.2)[0] - clipped_surrogate(ratio - h, adv, 0.2)[0]) / (2 * h)
    away = (np.abs(ratio - 0.8) > 1e-5) & (np.abs(ratio - 1.2) > 1e-5)
    np.testing.assert_allclose(d[away], num[away], atol=1e-6)


def test_snapshot_is_frozen_and_picklable():
    net = RecurrentNet(NetShape(3, 2, (4,), 3), seed=1)
    snap = PolicySnapshot.of(net, 5)
    net.params["head.b"] += 1.0
    assert not np.array_equal(snap.params["head.b"], net.params["head.b"])
    with pytest.raises(ValueError):
        snap.params["head.b"][0] = 2.0
    again = pickle.loads(pickle.dumps(snap))
    assert again.version == 5
    assert all(np.array_equal(again.params[k], snap.params[k]) for k in snap.params)


def test_segments_follow_episode_and_stop_at_done(toy_fleet):
    lr = small_learner(toy_fleet, horizon=4)
    fill(lr, toy_fleet)
    batch = lr.buffer.sample(16)
    sb = build_segments(lr.buffer, batch, 4, lr.actor.hidden)
    for b, tr in enumerate(batch.transitions):
        n = sb.lengths[b]
        assert 1 <= n <= 4
        assert np.array_equal(sb.actor_x[0, b], tr.state)
        assert sb.mask[:n, b].all() and not sb.mask[n:, b].any()
        assert sb.offset[b] == tr.t  # whole prefix is resident
        if tr.done:
            assert n == 1
        np.testing.assert_array_equal(sb.actor_h0[b], tr.actor_h)


def test_segment_gradients_match_finite_differences(toy_fleet):
    lr = small_learner(toy_fleet, horizon=3)
    fill(lr, toy_fleet)
    sb = build_segments(lr.buffer, lr.buffer.sample(8), 3, lr.actor.hidden)
    # perturb behaviour probabilities so ratios differ from one
    sb.logp_mu = sb.logp_mu + np.random.default_rng(0).normal(0, 0.1, sb.logp_mu.shape) * sb.mask
    cfg = lr.cfg
    out = segment_loss(lr.actor, lr.critic, sb, cfg)
    w = sb.weights[None, :] * sb.mask / sb.mask.sum()
    adv0, targ0 = out.adv.copy(), out.targets.copy()

    def policy_loss():
        logits = lr.actor.forward(sb.actor_x, sb.actor_h0, sb.actor_c0, record=False)[0]
        lp = log_softmax(logits)
        lpa = np.take_along_axis(lp, sb.actions[..., None], -1)[..., 0]
        ratio = np.exp(lpa - sb.logp_mu) * sb.mask + (1 - sb.mask)
        return -float((w * np.minimum(ratio * adv0, np.clip(ratio, 0.8, 1.2) * adv0)).sum())

    def value_loss():
        v = lr.critic.forward(sb.critic_x, record=False)[0][..., 0]
        vals = np.zeros_like(targ0)
        for b in range(vals.shape[1]):
            o, n = sb.offset[b], sb.lengths[b]
            vals[:n, b] = v[o:o + n, b]
        return 0.5 * float((w * (vals - targ0) ** 2).sum())

    assert policy_loss() == pytest.approx(out.policy_loss, rel=1e-12)
    num_a = oracles.central_difference(policy_loss, lr.actor.params)
    num_c = oracles.central_difference(value_loss, lr.critic.params)
    # the critic loss is O(10) here, so FD round-off is ~1e-10 absolute
    for k in num_a:
        np.testing.assert_allclose(out.actor_grads[k], num_a[k], rtol=1e-4, atol=1e-8)
    for k in num_c:
        np.testing.assert_allclose(out.critic_grads[k], num_c[k], rtol=1e-4, atol=1e-8)


@pytest.mark.parametrize("recurrent", [True, False])
def test_on_policy_reduces_to_td_actor_critic(toy_fleet, recurrent):
    lr = small_learner(toy_fleet, recurrent, horizon=1, rho_bar=math.inf, c_bar=math.inf)
    fill(lr, toy_fleet, steps=64)
    batch = lr.buffer.sample(16)
    sb = build_segments(lr.buffer, batch, 1, lr.actor.hidden, replay_prefix=recurrent)
    out = segment_loss(lr.actor, lr.critic, sb, lr.cfg)
    deltas, ga, gc = oracles.td_actor_critic_reference(lr.actor, lr.critic, lr.buffer, batch.transitions,
                                                       batch.weights, lr.cfg.gamma)
    np.testing.assert_allclose(out.ratio[0], 1.0, atol=1e-12)
    np.testing.assert_allclose(out.psi[0], deltas, atol=1e-12)
    np.testing.assert_allclose(out.adv[0], deltas, atol=1e-12)
    for k in ga:
        np.testing.assert_allclose(out.actor_grads[k], ga[k], atol=1e-12)
    for k in gc:
        np.testing.assert_allclose(out.critic_grads[k], gc[k], atol=1e-12)


def test_iteration_metrics_versions_and_priority_refresh(toy_fleet):
    lr = small_learner(toy_fleet, gradient_steps=1)
    assert lr.learn_iteration() is None
    fill(lr, toy_fleet)
    m = lr.learn_iteration()
    assert tuple(m) == METRIC_FIELDS
    assert m["iteration"] == 1 and m["snapshot_version"] == 1 and lr.updates == 1
    assert lr.snapshot().version == 1
    # refreshed priorities stay floored at eps
    assert np.all(lr.buffer.priorities[:len(lr.buffer)] >= lr.cfg.per_eps)


def test_priority_update_uses_first_step_td(toy_fleet):
    lr = small_learner(toy_fleet)
    fill(lr, toy_fleet)
    batch = lr.buffer.sample(16)
    sb = build_segments(lr.buffer, batch, lr.cfg.horizon, lr.actor.hidden)
    out = segment_loss(lr.actor, lr.critic, sb, lr.cfg)
    lr.buffer.update_priorities(sb.slots, out.psi[0], sb.generations)
    for i, d in zip(sb.slots, out.psi[0]):
        # duplicates in a batch keep the last write
        last = out.psi[0][np.flatnonzero(sb.slots == i)[-1]]
        assert lr.buffer.priorities[i] == pytest.approx(abs(last) + lr.cfg.per_eps)


def test_is_exponent_anneals_to_one(toy_fleet):
    lr = small_learner(toy_fleet, gradient_steps=1)
    lr.total_iterations = 5
    fill(lr, toy_fleet)
    seen = []
    for _ in range(5):
        lr.learn_iteration()
        seen.append(lr.buffer.iota)
    assert seen[0] == pytest.approx(0.4) and seen[-1] == pytest.approx(1.0)
    assert all(a <= b for a, b in zip(seen, seen[1:]))


def test_per_disabled_means_uniform_unweighted(toy_fleet):
    a = NetShape(toy_fleet.state_dim, toy_fleet.R, (8,), 4)
    c = NetShape(toy_fleet.state_dim, 1, (8,), 4)
    lr = Learner(a, c, LearnerConfig(batch_size=8), enable_per=False)
    assert lr.buffer.nu == 0.0 and lr.buffer.iota == 0.0


def test_two_state_bandit_is_learned():
    """Reward 1 for choosing the action equal to the state, else 0."""
    a = NetShape(2, 2, (8,), 4, recurrent=False)
    c = NetShape(2, 1, (8,), 4, recurrent=False)
    cfg = LearnerConfig(batch_size=32, horizon=1, reward_transform="none", lr_actor=0.05, lr_critic=0.05)
    lr = Learner(a, c, cfg, seed=3, total_iterations=200)
    rng = np.random.default_rng(0)
    eye = np.eye(2)
    ep = 0
    for _ in range(200):
        net = lr.snapshot().network()
        trs = []
        for _ in range(32):
            s = int(rng.integers(2))
            lp = log_softmax(net.forward(eye[s][None, None])[0][0, 0])
            act = int(rng.random() >= np.exp(lp[0]))
            ep += 1
            trs.append(Transition(eye[s], act, float(act == s), np.zeros(2), True, float(lp[act]),
                                  episode=(0, ep), t=0, version=lr.version))
        lr.ingest(trs)
        lr.learn_iteration()
    probs = np.exp(log_softmax(lr.actor.forward(eye[:, None, :])[0][:, 0]))
    assert probs[0, 0] >= 0.95 and probs[1, 1] >= 0.95
