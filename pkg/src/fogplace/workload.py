"""DAG-structured services: generation, serialization and critical-path analysis.

Task and control ids are 0-based throughout (task ``h`` of a K-task service is
``0..K-1``; security controls are ``0..14``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import MalformedDagError, ParameterError

N_CONTROLS = 15

# Generation ranges (uniform draws).
CPU_MI_RANGE = (0.5, 100.0)
MEM_MB_RANGE = (10.0, 1000.0)
STORAGE_MB_RANGE = (10.0, 1000.0)
DEADLINE_MS_RANGE = (10.0, 1000.0)
EDGE_KB_RANGE = (1.0, 1000.0)
MAX_CONTROLS_PER_TASK = 5

K_LEVELS = (5, 10, 20, 40, 80, 100)
FAT_LEVELS = (0.2, 0.4, 0.6, 0.8, 1.0)
DENSITY_LEVELS = (0.2, 0.4, 0.6, 0.8, 1.0)

# Candidate predecessors come from at most this many earlier layers.
LAYER_WINDOW = 2


@dataclass(frozen=True)
class Task:
    id: int
    cpu_mi: float = 0.0
    mem_mb: float = 0.0
    storage_mb: float = 0.0
    deadline_ms: float = 0.0
    controls: frozenset[int] = frozenset()


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    kb: float = 0.0


@dataclass(frozen=True)
class DagShapeParams:
    task_count: int
    fat: float
    density: float
    seed: int = 0

    def validate(self) -> None:
        if self.task_count < 1:
            raise ParameterError(f"task_count must be >= 1, got {self.task_count}")
        for name in ("fat", "density"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ParameterError(f"{name} must lie in (0, 1], got {v}")


@dataclass(frozen=True)
class ServiceDag:
    tasks: tuple[Task, ...]
    edges: tuple[Edge, ...]
    id: str = "service"
    layers: tuple[tuple[int, ...], ...] = field(default=(), compare=False)

    def __post_init__(self):
        ids = [t.id for t in self.tasks]
        if ids != list(range(len(ids))):
            raise MalformedDagError("task ids must be 0..K-1 in order")
        seen = set()
        for e in self.edges:
            if e.src == e.dst:
                raise MalformedDagError(f"self-loop on task {e.src}")
            if not (0 <= e.src < len(ids) and 0 <= e.dst < len(ids)):
                raise MalformedDagError(f"edge {e.src}->{e.dst} references unknown task")
            if (e.src, e.dst) in seen:
                raise MalformedDagError(f"duplicate edge {e.src}->{e.dst}")
            seen.add((e.src, e.dst))

    @property
    def size(self) -> int:
        return len(self.tasks)

    @cached_property
    def predecessors(self) -> tuple[tuple[int, ...], ...]:
        preds: list[list[int]] = [[] for _ in self.tasks]
        for e in self.edges:
            preds[e.dst].append(e.src)
        return tuple(tuple(sorted(p)) for p in preds)

    @cached_property
    def successors(self) -> tuple[tuple[int, ...], ...]:
        succ: list[list[int]] = [[] for _ in self.tasks]
        for e in self.edges:
            succ[e.src].append(e.dst)
        return tuple(tuple(sorted(s)) for s in succ)

    @cached_property
    def edge_kb(self) -> dict[tuple[int, int], float]:
        return {(e.src, e.dst): e.kb for e in self.edges}

    @cached_property
    def topological_order(self) -> tuple[int, ...]:
        """Kahn's algorithm, smallest id first among ready tasks."""
        indeg = [len(p) for p in self.predecessors]
        ready = [h for h, d in enumerate(indeg) if d == 0]
        order = []
        while ready:
            ready.sort()
            h = ready.pop(0)
            order.append(h)
            for s in self.successors[h]:
                indeg[s] -= 1
                if indeg[s] == 0:
                    ready.append(s)
        if len(order) != self.size:
            raise MalformedDagError(f"service {self.id!r} contains a cycle")
        return tuple(order)

    @property
    def entry_tasks(self) -> tuple[int, ...]:
        return tuple(h for h, p in enumerate(self.predecessors) if not p)

    @property
    def exit_tasks(self) -> tuple[int, ...]:
        return tuple(h for h, s in enumerate(self.successors) if not s)


def _layer_count(k: int, fat: float) -> int:
    return int(min(k, max(1, round(k ** (1.0 - 0.5 * fat)))))


def generate_topology(p: DagShapeParams) -> ServiceDag:
    """Layered random DAG; larger ``fat`` gives fewer, wider layers.

    Edges only run from earlier to later layers, so the result is acyclic.
    """
    p.validate()
    rng = np.random.default_rng(p.seed)
    k = p.task_count
    n_layers = _layer_count(k, p.fat)
    widths = np.ones(n_layers, dtype=int)
    if k > n_layers:
        widths += rng.multinomial(k - n_layers, np.full(n_layers, 1.0 / n_layers))

    layers: list[tuple[int, ...]] = []
    start = 0
    for w in widths:
        layers.append(tuple(range(start, start + int(w))))
        start += int(w)

    edges: list[Edge] = []
    for li in range(1, n_layers):
        window = [h for lj in range(max(0, li - LAYER_WINDOW), li) for h in layers[lj]]
        for dst in layers[li]:
            chosen = [src for src in window if rng.random() < p.density]
            if not chosen:
                chosen = [int(rng.choice(layers[li - 1]))]
            edges.extend(Edge(src, dst) for src in chosen)

    tasks = tuple(Task(h) for h in range(k))
    return ServiceDag(tasks, tuple(edges), id=f"dag-{p.seed}", layers=tuple(layers))


def assign_attributes(dag: ServiceDag, seed: int) -> ServiceDag:
    rng = np.random.default_rng(seed)
    tasks = []
    for t in dag.tasks:
        n_ctrl = int(rng.integers(1, MAX_CONTROLS_PER_TASK + 1))
        ctrls = rng.choice(N_CONTROLS, size=n_ctrl, replace=False)
        tasks.append(
            Task(
                id=t.id,
                cpu_mi=float(rng.uniform(*CPU_MI_RANGE)),
                mem_mb=float(rng.uniform(*MEM_MB_RANGE)),
                storage_mb=float(rng.uniform(*STORAGE_MB_RANGE)),
                deadline_ms=float(rng.uniform(*DEADLINE_MS_RANGE)),
                controls=frozenset(int(c) for c in ctrls),
            )
        )
    edges = tuple(Edge(e.src, e.dst, float(rng.uniform(*EDGE_KB_RANGE))) for e in dag.edges)
    return replace(dag, tasks=tuple(tasks), edges=edges)


def generate_service(p: DagShapeParams, attr_seed: int, service_id: str | None = None) -> ServiceDag:
    dag = assign_attributes(generate_topology(p), attr_seed)
    return replace(dag, id=service_id or f"svc-k{p.task_count}-s{p.seed}-a{attr_seed}")


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(x) for x in parts]).generate_state(1)[0])


def build_dataset(
    k_levels: Sequence[int] = K_LEVELS,
    fat_levels: Sequence[float] = FAT_LEVELS,
    density_levels: Sequence[float] = DENSITY_LEVELS,
    variants: int = 5,
    attr_sets: int = 10,
    seed: int = 0,
) -> list[ServiceDag]:
    """Full factorial dataset; the defaults give the 7,500-service corpus."""
    out = []
    for ki, k in enumerate(k_levels):
        for fi, fat in enumerate(fat_levels):
            for di, dens in enumerate(density_levels):
                for v in range(variants):
                    topo_seed = _derive_seed(seed, ki, fi, di, v)
                    topo = generate_topology(DagShapeParams(k, fat, dens, topo_seed))
                    for a in range(attr_sets):
                        attr_seed = _derive_seed(seed, ki, fi, di, v, a, 1)
                        sid = f"k{k}-f{fat:g}-d{dens:g}-v{v}-a{a}"
                        out.append(replace(assign_attributes(topo, attr_seed), id=sid))
    return out


def small_dataset(seed: int = 0) -> list[ServiceDag]:
    """CI profile: K in {5, 10}, 150 services."""
    return build_dataset(k_levels=(5, 10), variants=3, attr_sets=1, seed=seed)


class ServiceGenerator:
    """Endless stream of random services drawn from the canonical shape levels."""

    def __init__(self, k_levels: Sequence[int] = (5, 10), seed: int = 0,
                 fat_levels: Sequence[float] = FAT_LEVELS,
                 density_levels: Sequence[float] = DENSITY_LEVELS, prefix: str = "gen"):
        self.k_levels = tuple(k_levels)
        self.fat_levels = tuple(fat_levels)
        self.density_levels = tuple(density_levels)
        self.rng = np.random.default_rng(seed)
        self.prefix = prefix
        self.count = 0

    def __iter__(self):
        return self

    def __next__(self) -> ServiceDag:
        k = int(self.rng.choice(self.k_levels))
        fat = float(self.rng.choice(self.fat_levels))
        dens = float(self.rng.choice(self.density_levels))
        topo_seed, attr_seed = (int(x) for x in self.rng.integers(0, 2**31, size=2))
        svc = generate_service(DagShapeParams(k, fat, dens, topo_seed), attr_seed,
                               service_id=f"{self.prefix}-{self.count}")
        self.count += 1
        return svc

    def take(self, n: int) -> list[ServiceDag]:
        return [next(self) for _ in range(n)]


# -- critical path -----------------------------------------------------------

def average_costs(dag: ServiceDag, infra) -> tuple[np.ndarray, dict[tuple[int, int], float]]:
    """Mean computation time per task and mean transfer time per edge, in ms."""
    comp = np.array([t.cpu_mi for t in dag.tasks]) / infra.mean_mips * 1000.0
    bw = infra.mean_bandwidth
    comm = {(e.src, e.dst): e.kb * 8.0 / bw for e in dag.edges}
    return comp, comm


def upward_rank_from_costs(dag: ServiceDag, comp: Sequence[float],
                           comm: dict[tuple[int, int], float] | None = None) -> np.ndarray:
    comm = comm or {}
    rank = np.zeros(dag.size)
    for h in reversed(dag.topological_order):
        tail = max((comm.get((h, s), 0.0) + rank[s] for s in dag.successors[h]), default=0.0)
        rank[h] = comp[h] + tail
    return rank


def upward_rank(dag: ServiceDag, infra) -> np.ndarray:
    comp, comm = average_costs(dag, infra)
    return upward_rank_from_costs(dag, comp, comm)


def critical_path_from_costs(dag: ServiceDag, comp: Sequence[float],
                             comm: dict[tuple[int, int], float] | None = None) -> tuple[int, ...]:
    comm = comm or {}
    rank = upward_rank_from_costs(dag, comp, comm)
    # max() keeps the first maximal element, so iterating ids ascending breaks ties low.
    h = max(dag.entry_tasks, key=lambda t: rank[t])
    path = [h]
    while dag.successors[h]:
        h = max(dag.successors[h], key=lambda s: comm.get((h, s), 0.0) + rank[s])
        path.append(h)
    return tuple(path)


def critical_path(dag: ServiceDag, infra) -> tuple[tuple[int, ...], np.ndarray]:
    """Critical-path task ids and the 0/1 membership indicator per task."""
    comp, comm = average_costs(dag, infra)
    path = critical_path_from_costs(dag, comp, comm)
    beta = np.zeros(dag.size, dtype=np.int8)
    beta[list(path)] = 1
    return path, beta


def task_order_from_rank(dag: ServiceDag, rank: Sequence[float],
                         security_weight: Sequence[float] | None = None) -> tuple[int, ...]:
    indeg = [len(p) for p in dag.predecessors]
    ready = {h for h, d in enumerate(indeg) if d == 0}
    sec = security_weight if security_weight is not None else np.zeros(dag.size)
    order = []
    while ready:
        h = min(ready, key=lambda t: (-rank[t], -sec[t], t))
        ready.remove(h)
        order.append(h)
        for s in dag.successors[h]:
            indeg[s] -= 1
            if indeg[s] == 0:
                ready.add(s)
    if len(order) != dag.size:
        raise MalformedDagError(f"service {dag.id!r} contains a cycle")
    return tuple(order)


def task_order(dag: ServiceDag, infra, hard_controls: Iterable[int] | None = None) -> tuple[int, ...]:
    """Ready-list order by descending upward rank.

    With ``hard_controls`` given, rank ties go to tasks requiring more of them.
    """
    rank = upward_rank(dag, infra)
    sec = None
    if hard_controls is not None:
        hard = set(hard_controls)
        sec = [len(t.controls & hard) for t in dag.tasks]
    return task_order_from_rank(dag, rank, sec)


# -- serialization -----------------------------------------------------------

def service_to_dict(dag: ServiceDag) -> dict:
    return {
        "id": dag.id,
        "tasks": [
            {"id": t.id, "cpu_mi": t.cpu_mi, "mem_mb": t.mem_mb, "storage_mb": t.storage_mb,
             "deadline_ms": t.deadline_ms, "controls": sorted(t.controls)}
            for t in dag.tasks
        ],
        "edges": [{"src": e.src, "dst": e.dst, "kb": e.kb} for e in dag.edges],
    }


def service_from_dict(d: dict) -> ServiceDag:
    try:
        tasks = tuple(
            Task(int(t["id"]), float(t["cpu_mi"]), float(t["mem_mb"]), float(t["storage_mb"]),
                 float(t["deadline_ms"]), frozenset(int(c) for c in t["controls"]))
            for t in d["tasks"]
        )
        edges = tuple(Edge(int(e["src"]), int(e["dst"]), float(e["kb"])) for e in d["edges"])
    except (KeyError, TypeError) as exc:
        raise MalformedDagError(f"bad service record: {exc}") from exc
    dag = ServiceDag(tasks, edges, id=str(d["id"]))
    dag.topological_order  # noqa: B018 - raises on cycles
    return dag


def save_services(services: Iterable[ServiceDag], path: str | Path) -> None:
    data = [service_to_dict(s) for s in services]
    Path(path).write_text(json.dumps(data, indent=1) + "\n")


def load_services(path: str | Path) -> list[ServiceDag]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = [data]
    return [service_from_dict(d) for d in data]
