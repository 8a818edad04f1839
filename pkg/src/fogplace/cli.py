"""fogplace command line.

Exit codes: 0 success, 1 usage error, 2 invalid input, 3 runtime failure.
Diagnostics go to stderr; data goes to files or stdout.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Sequence

from .environment import EnvConfig, EpisodeSummary, Fleet, weighted_cost
from .errors import CheckpointError
from .infrastructure import DEFAULT_AREA, Infrastructure, generate_infrastructure
from .orchestrator import (REFERENCE_POLICIES, TRAIN_FIELDS, EvalSummary, ExperimentConfig, SpeedupRow,
                           bench_speedup, evaluate, toy_config, train, write_csv)
from .security import SecurityCatalog
from .workload import (K_LEVELS, ServiceGenerator, build_dataset, load_services, save_services,
                       small_dataset)

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2, 3

EXPORT_FIELDS = ("iteration", "env_steps", "response_time_ms", "security_score", "weighted_cost",
                 "violation_rate", "train_weighted_cost", "policy_loss", "value_loss", "mean_abs_td",
                 "mean_ratio", "snapshot_version")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# -- subcommands ---------------------------------------------------------------

def cmd_gen_workloads(a) -> int:
    if a.profile == "full":
        services = build_dataset(seed=a.seed)
    elif a.profile == "small":
        services = small_dataset(seed=a.seed)
    else:
        services = ServiceGenerator(a.k, seed=a.seed, prefix=a.prefix).take(a.count)
    save_services(services, a.out)
    _log(f"wrote {len(services)} services to {a.out}")
    return EXIT_OK


def cmd_gen_infra(a) -> int:
    infra = generate_infrastructure((a.cloud, a.fog, a.iot), area=a.area, seed=a.seed,
                                    catalog=SecurityCatalog.default(), cnf_mode=a.cnf_mode)
    infra.save(a.out)
    _log(f"wrote {len(infra)} servers to {a.out}")
    return EXIT_OK


def _experiment(a) -> ExperimentConfig:
    cfg = ExperimentConfig.load(a.config) if a.config else (toy_config() if a.toy else ExperimentConfig())
    kw = {"seed": a.seed, "iterations": a.iters, "brokers": a.brokers, "executor": a.executor,
          "infra_path": a.infra, "workload_path": a.workload}
    if getattr(a, "alpha", None) is not None:
        kw["alpha"], kw["beta"] = a.alpha, 1.0 - a.alpha
    if getattr(a, "no_lstm", False):
        kw["enable_lstm"] = False
    if getattr(a, "no_per", False):
        kw["enable_per"] = False
    return cfg.override(**kw)


def cmd_train(a) -> int:
    cfg = _experiment(a)

    def progress(row):
        if a.verbose:
            _log(f"iter {row['iteration']}: policy {row['policy_loss']:.4g} value {row['value_loss']:.4g} "
                 f"|psi| {row['mean_abs_td']:.4g}")

    res = train(cfg, a.out, progress=progress)
    w = csv.writer(sys.stdout)
    w.writerow(["key", "value"])
    for k, v in (("iterations", res.learner.iteration), ("env_steps", res.env_steps),
                 ("emitted", res.emitted), ("ingested", res.ingested),
                 ("checkpoint", res.checkpoint), ("metrics", Path(a.out) / "metrics.csv")):
        w.writerow([k, v])
    if res.emitted != res.ingested:
        _log(f"experience count mismatch: emitted {res.emitted}, ingested {res.ingested}")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_eval(a) -> int:
    infra = Infrastructure.load(a.infra)
    services = load_services(a.workload)
    fleet = Fleet(infra, SecurityCatalog.default())
    env_cfg = EnvConfig(alpha=a.alpha, beta=1.0 - a.alpha)
    res = evaluate(a.checkpoint, services, fleet, env_cfg, references=a.references, seed=a.seed)
    if a.episodes:
        rows = []
        for name, eps in res.rows.items():
            for e in eps:
                r = e.csv_row()
                r["policy"] = name
                rows.append(r)
        write_csv(a.episodes, rows, ("policy",) + EpisodeSummary.CSV_FIELDS)
    w = csv.DictWriter(sys.stdout, fieldnames=EvalSummary.CSV_FIELDS)
    w.writeheader()
    for s in res.summaries.values():
        w.writerow(s.row())
    return EXIT_OK


def _assignments(doc, services) -> dict[str, dict[int, int]]:
    """Accepts ``{service_id: [server per task]}``, ``{service_id: {task: server}}``
    or, for a single-service workload, a bare list or mapping."""
    if isinstance(doc, list) or (isinstance(doc, dict) and doc and all(k.isdigit() for k in doc)):
        if len(services) != 1:
            raise ValueError("a bare assignment needs a single-service workload")
        doc = {services[0].id: doc}
    if not isinstance(doc, dict):
        raise ValueError("assignment must be a JSON object or list")
    out = {}
    for sid, v in doc.items():
        if isinstance(v, list):
            out[sid] = {h: int(s) for h, s in enumerate(v)}
        elif isinstance(v, dict):
            out[sid] = {int(h): int(s) for h, s in v.items()}
        else:
            raise ValueError(f"assignment for {sid!r} must be a list or object")
    return out


def cmd_score(a) -> int:
    services = load_services(a.workload)
    fleet = Fleet(Infrastructure.load(a.infra), SecurityCatalog.default())
    by_id = {s.id: s for s in services}
    assign = _assignments(json.loads(Path(a.assignment).read_text()), services)
    w = csv.writer(sys.stdout)
    w.writerow(["service_id", "response_time_ms", "security_score", "weighted_cost", "security_violations"])
    for sid, phi in assign.items():
        if sid not in by_id:
            raise ValueError(f"service {sid!r} not in workload")
        bad = [s for s in phi.values() if not 0 <= s < fleet.R]
        if bad:
            raise ValueError(f"server ids {bad} outside [0, {fleet.R})")
        c = weighted_cost(phi, by_id[sid], fleet, a.alpha, 1.0 - a.alpha)
        w.writerow([sid, repr(c.response_time), repr(c.security_score), repr(c.weighted_cost),
                    c.n_security_violations])
    return EXIT_OK


def cmd_bench(a) -> int:
    cfg = _experiment(a)

    def progress(row: SpeedupRow):
        _log(f"{row.workers} broker(s): {row.seconds:.2f}s for {row.env_steps} steps, SP={row.speedup:.2f}")

    rows = bench_speedup(cfg, a.workers, a.target_steps, progress)
    dicts = [{k: getattr(r, k) for k in SpeedupRow.CSV_FIELDS} for r in rows]
    if a.out:
        write_csv(a.out, dicts, SpeedupRow.CSV_FIELDS)
    w = csv.DictWriter(sys.stdout, fieldnames=SpeedupRow.CSV_FIELDS)
    w.writeheader()
    w.writerows(dicts)
    return EXIT_OK


def _read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_export(a) -> int:
    from . import plotting

    rows = _read_csv(a.metrics) if a.metrics else []
    if rows:
        missing = set(TRAIN_FIELDS) - set(rows[0])
        if missing:
            raise ValueError(f"{a.metrics}: missing columns {sorted(missing)}")
    rename = {"eval_response_time_ms": "response_time_ms", "eval_security_score": "security_score",
              "eval_weighted_cost": "weighted_cost", "eval_violation_rate": "violation_rate"}
    out_rows = []
    for r in rows:
        if not a.all_rows and r["eval_weighted_cost"] == "":
            continue
        out_rows.append({rename.get(k, k): v for k, v in r.items()})
    if a.out:
        write_csv(a.out, out_rows, EXPORT_FIELDS)
    elif rows:
        w = csv.DictWriter(sys.stdout, fieldnames=EXPORT_FIELDS, extrasaction="ignore")
        w.writeheader()
        w.writerows(out_rows)
    if a.figures:
        fig_dir = Path(a.figures)
        fig_dir.mkdir(parents=True, exist_ok=True)
        made = []
        if rows:
            made.append(plotting.training_figure(rows, fig_dir / "training.png"))
            made.append(plotting.loss_figure(rows, fig_dir / "losses.png"))
        if a.speedup:
            made.append(plotting.speedup_figure(_read_csv(a.speedup), fig_dir / "speedup.png"))
        if a.summary:
            made.append(plotting.comparison_figure(_read_csv(a.summary), fig_dir / "policies.png"))
        for p in made:
            _log(f"wrote {p}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def _alpha(p):
    p.add_argument("--alpha", type=float, default=0.5, help="latency weight; security weight is 1 - alpha")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fogplace", description="Secure DAG service placement on fog infrastructure.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    g = sub.add_parser("gen-workloads", help="generate DAG services to JSON")
    g.add_argument("--k", type=int, nargs="+", default=list(K_LEVELS), help="task-count levels")
    g.add_argument("--count", type=int, default=100, help="services to draw (stream profile)")
    g.add_argument("--profile", choices=("stream", "small", "full"), default="stream",
                   help="stream: --count random services; small: 150-service grid; full: 7,500-service grid")
    g.add_argument("--prefix", default="svc", help="service id prefix (stream profile)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output JSON file")
    g.set_defaults(func=cmd_gen_workloads)

    g = sub.add_parser("gen-infra", help="generate a three-tier server fleet to JSON")
    g.add_argument("--cloud", type=int, default=20)
    g.add_argument("--fog", type=int, default=30)
    g.add_argument("--iot", type=int, default=50)
    g.add_argument("--area", type=float, default=DEFAULT_AREA, help="square side in metres")
    g.add_argument("--cnf-mode", choices=("control", "item"), default="control",
                   help="how enabled configuration items are drawn")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output JSON file")
    g.set_defaults(func=cmd_gen_infra)

    for name, func, hlp in (("train", cmd_train, "train brokers and learner"),
                            ("bench-speedup", cmd_bench, "time brokers to a step target")):
        g = sub.add_parser(name, help=hlp)
        g.add_argument("--config", help="TOML experiment file; flags override it")
        g.add_argument("--toy", action="store_true", help="start from the 25-server toy setup")
        g.add_argument("--seed", type=int)
        g.add_argument("--iters", type=int, help="learner iterations")
        g.add_argument("--brokers", type=int)
        g.add_argument("--executor", choices=("inline", "process"))
        g.add_argument("--infra", help="fleet JSON (default: generated from the config)")
        g.add_argument("--workload", help="services JSON (default: generated from the config)")
        g.add_argument("--alpha", type=float, help="latency weight; security weight is 1 - alpha")
        g.add_argument("--no-lstm", action="store_true", help="feedforward ablation")
        g.add_argument("--no-per", action="store_true", help="uniform replay ablation")
        if name == "train":
            g.add_argument("--out", default="run", help="output directory")
            g.add_argument("-v", "--verbose", action="store_true", help="per-iteration progress on stderr")
        else:
            g.add_argument("--workers", type=int, nargs="+", default=[1, 2, 4])
            g.add_argument("--target-steps", type=int, default=150_000)
            g.add_argument("--out", help="also write the table to this CSV")
        g.set_defaults(func=func)

    g = sub.add_parser("eval", help="argmax rollouts of a checkpoint with reference policies")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--infra", required=True)
    g.add_argument("--workload", required=True)
    g.add_argument("--references", nargs="*", default=["random"], choices=sorted(REFERENCE_POLICIES))
    g.add_argument("--episodes", help="per-service CSV output")
    g.add_argument("--seed", type=int, default=0, help="seed of the random reference")
    _alpha(g)
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("score", help="response time, security score and weighted cost of a placement")
    g.add_argument("--workload", required=True)
    g.add_argument("--infra", required=True)
    g.add_argument("--assignment", required=True,
                   help='JSON: {"service_id": [server of task 0, task 1, ...]}')
    g.add_argument("--seed", type=int, default=0, help="accepted for uniformity; scoring is deterministic")
    _alpha(g)
    g.set_defaults(func=cmd_score)

    g = sub.add_parser("export-metrics", help="plot-ready CSV and optional figures")
    g.add_argument("--metrics", help="metrics.csv from a training run")
    g.add_argument("--speedup", help="CSV from bench-speedup")
    g.add_argument("--summary", help="summary CSV from eval")
    g.add_argument("--all-rows", action="store_true", help="keep iterations without evaluation")
    g.add_argument("--out", help="output CSV (default stdout)")
    g.add_argument("--figures", help="directory for PNG figures")
    g.add_argument("--seed", type=int, default=0, help="accepted for uniformity; export is deterministic")
    g.set_defaults(func=cmd_export)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        _log(str(exc))
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, CheckpointError) as exc:
        _log(f"error: {exc}")
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        _log(f"runtime failure: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
