import math

import numpy as np
import pytest

from fogplace.environment import (DEFAULT_P_FAILURE, EnvConfig, Fleet, PlacementEnv, check_constraints,
                                  completion_time, compose_state, exhaustive_placement, mask_from_state,
                                  response_time, weighted_cost, write_episode_csv)
from fogplace.errors import ActionError, ConfigError, IncompleteDeploymentError, LifecycleError, OrderingError
from fogplace.infrastructure import generate_infrastructure
from fogplace.workload import ServiceGenerator

import oracles
from conftest import all_items, chain, make_infra, make_server


@pytest.fixture
def two_servers(catalog):
    full = all_items(catalog, range(15))
    servers = [make_server(0, mips=1000.0, x=0.0, iface=100.0, items=full),
               make_server(1, mips=4000.0, x=30_000.0, iface=10.0, items=full)]
    return Fleet(make_infra(servers), catalog)


def test_completion_time_by_hand(two_servers):
    dag = chain(2, cpu=50.0, kb=125.0)
    infra = two_servers.infra
    comp, wait, T = completion_time(0, 0, {}, dag, infra)
    assert (comp, wait) == (50.0, 0.0)
    # 125 kB over min(100, 10) Mbps = 100 ms, plus 30 km / 2e8 m/s = 0.15 ms
    comp, wait, T = completion_time(1, 1, {0: 0}, dag, infra)
    assert comp == pytest.approx(12.5)
    assert wait == pytest.approx(100.15)
    _, wait, _ = completion_time(1, 0, {0: 0}, dag, infra)
    assert wait == 0.0
    with pytest.raises(OrderingError):
        completion_time(1, 0, {}, dag, infra)


def test_response_time_matches_path_oracle():
    infra = generate_infrastructure((2, 3, 3), seed=4)
    servers = oracles.server_dicts(infra)
    rng = np.random.default_rng(0)
    for dag in ServiceGenerator((5, 10), seed=8).take(30):
        placement = {h: int(rng.integers(len(infra))) for h in range(dag.size)}
        assert response_time(placement, dag, infra) == pytest.approx(
            oracles.response_time_oracle(placement, dag, servers), rel=1e-12)
    with pytest.raises(IncompleteDeploymentError):
        response_time({0: 0}, dag, infra)


def test_exhaustive_placement_alpha_one_matches_brute_force(catalog):
    infra = generate_infrastructure((1, 1, 1), seed=3, catalog=catalog)
    fleet = Fleet(infra, catalog)
    for dag in ServiceGenerator((5,), seed=1).take(2):
        small = dag.__class__(dag.tasks[:3], tuple(e for e in dag.edges if e.src < 3 and e.dst < 3), id="s")
        assign, cost = exhaustive_placement(small, fleet, alpha=1.0, beta=0.0)
        _, best_l = oracles.brute_min_latency(small, infra)
        assert cost.response_time == pytest.approx(best_l, rel=1e-12)
    with pytest.raises(ValueError):
        exhaustive_placement(chain(20), fleet, 1.0, 0.0)


def test_weighted_cost_terms(two_servers, catalog):
    dag = chain(2, controls={0, 5})
    full = weighted_cost({0: 0, 1: 0}, dag, two_servers, 0.5, 0.5)
    assert full.security_score == 100.0
    assert full.security_term == 0.0
    assert 0.0 <= full.latency_term <= 1.0
    assert full.weighted_cost == pytest.approx(0.5 * full.latency_term)
    with pytest.raises(ConfigError):
        weighted_cost({0: 0, 1: 0}, dag, two_servers, 0.7, 0.7)


def test_penalized_task_contributes_raw_penalty(catalog):
    full = all_items(catalog, range(15))
    servers = [make_server(0, items=full), make_server(1, items=full - {catalog.items[0][0][0]})]
    fleet = Fleet(make_infra(servers), catalog)
    dag = chain(2, controls={0})
    c = weighted_cost({0: 0, 1: 1}, dag, fleet, 0.0, 1.0)
    assert c.n_security_violations == 1
    assert c.security_term == pytest.approx((0.0 + 1e5) / 2)


def test_constraint_report(two_servers):
    dag = chain(3, mem=3000.0, deadline=1e9)
    rep = check_constraints({0: 0, 1: 0, 2: 1}, dag, two_servers.infra)
    assert not rep.memory_ok and 0 in rep.memory_overload
    assert rep.storage_ok and rep.deadlines_ok and rep.placement_ok
    rep = check_constraints({0: 0, 1: 5}, dag, two_servers.infra)
    assert rep.unassigned == [2] and rep.invalid_server == [1] and not rep.ok
    late = chain(2, deadline=1.0)
    assert check_constraints({0: 0, 1: 0}, late, two_servers.infra).late_tasks == [0, 1]


def test_env_config_validation():
    with pytest.raises(ConfigError):
        EnvConfig(alpha=0.6, beta=0.6)
    with pytest.raises(ConfigError):
        EnvConfig(alpha=-0.5, beta=1.5)
    with pytest.raises(ConfigError):
        EnvConfig(p_failure=1.0)


def test_episode_lifecycle_and_summary_matches_weighted_cost(toy_fleet):
    rng = np.random.default_rng(3)
    for dag in ServiceGenerator((5, 10), seed=2).take(10):
        env = PlacementEnv(dag, toy_fleet)
        s = env.reset()
        assert s.shape == (toy_fleet.state_dim,)
        while not env.done:
            assert np.all((s >= 0) & (s <= 1))
            out = env.step(int(rng.integers(env.R)))
            s = out.state
        summ = out.info["summary"]
        ref = weighted_cost(env.deployment.assignment, dag, toy_fleet)
        assert summ.weighted_cost == pytest.approx(ref.weighted_cost, rel=1e-12)
        assert summ.response_time_ms == pytest.approx(ref.response_time, rel=1e-12)
        assert summ.episode_return == pytest.approx(sum(env.rewards))
        with pytest.raises(LifecycleError):
            env.step(0)


def test_step_reward_formula(two_servers):
    dag = chain(2, deadline=1e9, controls={5})
    env = PlacementEnv(dag, two_servers, EnvConfig(alpha=0.3, beta=0.7))
    out = env.step(1)
    lat, sec = env.task_reward_terms(0, 1, out.info["t"])
    assert out.reward == pytest.approx(-(0.3 * lat + 0.7 * sec))
    with pytest.raises(ActionError):
        env.step(2)


def test_late_and_overflow_give_failure_penalty(two_servers):
    env = PlacementEnv(chain(1, deadline=1.0), two_servers)
    out = env.step(0)
    assert out.reward == DEFAULT_P_FAILURE and out.info["deadline_violation"]
    env = PlacementEnv(chain(1, mem=10_000.0), two_servers)
    out = env.step(0)
    assert out.reward == DEFAULT_P_FAILURE and out.info["capacity_violation"]
    assert out.info["summary"].capacity_violations == 1


def test_mask_from_state_matches_env(catalog):
    servers = [make_server(i, mem=m) for i, m in enumerate([50.0, 500.0, 5000.0])]
    fleet = Fleet(make_infra(servers), catalog)
    env = PlacementEnv(chain(3, mem=400.0), fleet, EnvConfig(mask_actions=True))
    for a in (1, 2, 2):
        m = mask_from_state(env.state(), fleet.R)
        assert np.array_equal(m, env.action_mask()) or not env.action_mask().any()
        env.step(a)
    full = np.stack([np.zeros(fleet.state_dim)] * 2)
    assert mask_from_state(full, fleet.R).all()


def test_compose_state_matches_running_episode(toy_fleet):
    dag = ServiceGenerator((10,), seed=6).take(1)[0]
    env = PlacementEnv(dag, toy_fleet)
    for a in (3, 3, 7, 1):
        env.step(a)
    s = compose_state(dag, env.order, env.t, env.deployment, toy_fleet)
    assert np.array_equal(s, env.state())


def test_episode_csv(tmp_path, toy_fleet):
    env = PlacementEnv(chain(2), toy_fleet)
    env.step(0)
    env.step(0)
    write_episode_csv([env.summary()], tmp_path / "e.csv")
    text = (tmp_path / "e.csv").read_text().splitlines()
    assert text[0].startswith("service_id,tasks,response_time_ms")
    assert len(text) == 2


def test_latency_term_bounded(toy_fleet):
    rng = np.random.default_rng(0)
    for dag in ServiceGenerator((10,), seed=11).take(10):
        a = {h: int(rng.integers(toy_fleet.R)) for h in range(dag.size)}
        c = weighted_cost(a, dag, toy_fleet, 1.0, 0.0)
        assert 0.0 <= c.latency_term <= 1.0 + 1e-12
        assert not math.isnan(c.weighted_cost)
