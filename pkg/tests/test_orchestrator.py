import csv
import json

import numpy as np
import pytest

from fogplace.environment import Fleet, PlacementEnv, exhaustive_placement
from fogplace.errors import CheckpointError, ConfigError
from fogplace.orchestrator import (TRAIN_FIELDS, ExperimentConfig, GreedyLatency, GreedySecurity,
                                   RandomPolicy, build_world, evaluate, evaluate_policy,
                                   iterations_to_threshold, reference_policy, smoothed_curve, toy_config,
                                   train)
from fogplace.workload import ServiceDag, Task

from conftest import all_items, chain, make_infra, make_server


def tiny(**kw):
    base = dict(servers=(1, 2, 3), fc=(8,), hidden=4, train_services=20, eval_services=6,
                curve_services=4, iterations=3, n_steps=24, eval_every=1,
                **{"learner.batch_size": 16})
    base.update(kw)
    return toy_config(**base)


def test_config_validation_and_mapping(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig(alpha=0.9, beta=0.9)
    with pytest.raises(ConfigError):
        ExperimentConfig(executor="threads")
    with pytest.raises(ConfigError):
        ExperimentConfig(servers=(0, 0, 0))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_mapping({"sead": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_mapping({"learner": {"gama": 0.9}})
    p = tmp_path / "c.toml"
    p.write_text('seed = 4\nk_levels = [5]\nfc = [16, 16]\n[servers]\ncloud = 1\nfog = 2\niot = 3\n'
                 '[learner]\ngamma = 0.8\nbatch_size = 32\n')
    cfg = ExperimentConfig.load(p)
    assert cfg.seed == 4 and cfg.servers == (1, 2, 3) and cfg.fc == (16, 16)
    assert cfg.learner.gamma == 0.8 and cfg.learner.batch_size == 32
    assert ExperimentConfig.from_mapping(json.loads(json.dumps(cfg.to_dict()))) == cfg
    (tmp_path / "bad.toml").write_text("seed = = 1")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "bad.toml")


def test_override_ignores_none_and_sets_learner_keys():
    cfg = toy_config().override(seed=None, brokers=3, **{"learner.lr_actor": 0.002})
    assert cfg.seed == 0 and cfg.brokers == 3 and cfg.learner.lr_actor == 0.002


def test_toy_world_shape():
    cfg = toy_config()
    w = build_world(cfg)
    assert len(w.infra) == 25
    assert [s.tier for s in w.infra.servers].count("cloud") == 4
    assert len(w.held_out) == 100 and {d.size for d in w.held_out} == {5, 10}
    train_ids = {d.id for d in w.train}
    assert not train_ids & {d.id for d in w.held_out}


def test_greedy_latency_is_optimal_for_single_task(catalog):
    full = all_items(catalog, range(15))
    servers = [make_server(i, mips=m, items=full) for i, m in enumerate([2000.0, 9000.0, 5000.0])]
    fleet = Fleet(make_infra(servers), catalog)
    dag = ServiceDag((Task(0, 50.0, 10.0, 10.0, 1e9, frozenset({4})),), (), id="one")
    env = PlacementEnv(dag, fleet)
    a = GreedyLatency().act(env)
    best, _ = exhaustive_placement(dag, fleet, 1.0, 0.0)
    assert a == best[0] == 1


def test_greedy_security_prefers_compliant_then_fast(catalog):
    full = all_items(catalog, range(15))
    servers = [make_server(0, mips=9000.0, items=set()), make_server(1, mips=1000.0, items=full),
               make_server(2, mips=3000.0, items=full)]
    fleet = Fleet(make_infra(servers), catalog)
    env = PlacementEnv(chain(1, controls={0}), fleet)
    assert GreedySecurity().act(env) == 2
    with pytest.raises(ConfigError):
        reference_policy("oracle")


def test_threshold_helpers():
    assert iterations_to_threshold([(0, 5.0), (10, 2.0), (20, 1.0)], 2.0, 30) == 10
    assert iterations_to_threshold([(0, 5.0)], 1.0, 30) == 31
    curve = smoothed_curve([(1, [4.0]), (2, []), (3, [2.0, 0.0])], window=2)
    assert curve == [(1, 4.0), (2, 4.0), (3, 1.0)]


def test_inline_training_writes_outputs(tmp_path):
    cfg = tiny()
    tr = train(cfg, tmp_path)
    assert len(tr.metrics) == 3
    assert tr.emitted == tr.ingested == tr.env_steps
    assert all(v == sorted(v) for v in tr.versions_seen.values())
    rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert list(rows[0]) == list(TRAIN_FIELDS) and len(rows) == 3
    assert json.loads((tmp_path / "config.json").read_text())["seed"] == cfg.seed
    assert tr.curve[0][0] == 0 and len(tr.curve) == 4

    world = build_world(cfg)
    res = evaluate(tr.checkpoint, world.held_out, world.fleet, world.env_config,
                   references=("random", "greedy_latency"))
    assert set(res.summaries) == {"actor", "random", "greedy_latency"}
    assert all(s.services == 6 for s in res.summaries.values())
    other = build_world(tiny(servers=(2, 2, 3)))
    with pytest.raises(CheckpointError):
        evaluate(tr.checkpoint, other.held_out, other.fleet)


def test_zero_iterations_still_checkpoints(tmp_path):
    tr = train(tiny(iterations=0), tmp_path)
    assert tr.metrics == [] and (tmp_path / "checkpoint.zip").exists()


def test_process_executor_conserves_experience():
    tr = train(tiny(executor="process", brokers=2, iterations=4))
    assert tr.learner.iteration == 4
    assert tr.emitted == tr.ingested == tr.env_steps
    assert set(tr.versions_seen) == {0, 1}
    assert all(v == sorted(v) for v in tr.versions_seen.values())


def test_random_reference_is_seeded(toy_fleet):
    from fogplace.workload import ServiceGenerator
    svcs = ServiceGenerator((5,), seed=0).take(5)
    a = evaluate_policy(RandomPolicy(1), svcs, toy_fleet)[1]
    b = evaluate_policy(RandomPolicy(1), svcs, toy_fleet)[1]
    assert a == b
    assert np.isfinite(a.mean_weighted_cost)
