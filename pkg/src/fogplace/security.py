"""Control / capability / configuration-item compliance scoring."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import CatalogError, ConfigError, IncompleteDeploymentError

N_CONTROLS = 15
CAPS_PER_CONTROL = 5
ITEMS_PER_CAP = 3

DEFAULT_HARD_CONTROLS = frozenset({0, 1, 2})
DEFAULT_P_CONSTRAINT = -1e5


@dataclass(frozen=True)
class SecurityCatalog:
    """Three-tier hierarchy.

    ``items[k][l]`` is the tuple of configuration-item ids of capability ``l``
    of control ``k``; ``cap_weights[k][l]`` its weight inside the control.
    """

    items: tuple[tuple[tuple[int, ...], ...], ...]
    cap_weights: tuple[tuple[float, ...], ...]
    ctrl_weights: tuple[float, ...]
    hard_controls: frozenset[int] = DEFAULT_HARD_CONTROLS

    def __post_init__(self):
        self.validate()

    @classmethod
    def default(cls, hard_controls: Iterable[int] = DEFAULT_HARD_CONTROLS,
                n_controls: int = N_CONTROLS, caps: int = CAPS_PER_CONTROL,
                items_per_cap: int = ITEMS_PER_CAP) -> "SecurityCatalog":
        items = tuple(
            tuple(
                tuple((k * caps + l) * items_per_cap + i for i in range(items_per_cap))
                for l in range(caps)
            )
            for k in range(n_controls)
        )
        cap_w = tuple(tuple(1.0 / caps for _ in range(caps)) for _ in range(n_controls))
        ctrl_w = tuple(1.0 for _ in range(n_controls))
        return cls(items, cap_w, ctrl_w, frozenset(hard_controls))

    @property
    def n_controls(self) -> int:
        return len(self.items)

    @cached_property
    def n_items(self) -> int:
        return sum(len(c) for ctrl in self.items for c in ctrl)

    @cached_property
    def item_ids(self) -> tuple[int, ...]:
        return tuple(sorted(i for ctrl in self.items for cap in ctrl for i in cap))

    def validate(self) -> None:
        seen: set[int] = set()
        if len(self.cap_weights) != len(self.items) or len(self.ctrl_weights) != len(self.items):
            raise CatalogError("weight tables do not match the control list")
        for k, ctrl in enumerate(self.items):
            if len(ctrl) == 0 or len(self.cap_weights[k]) != len(ctrl):
                raise CatalogError(f"control {k}: capability/weight mismatch")
            for l, cap in enumerate(ctrl):
                if len(cap) == 0:
                    raise CatalogError(f"control {k} capability {l} has no configuration items")
                for i in cap:
                    if i in seen:
                        raise CatalogError(f"configuration item {i} appears twice")
                    seen.add(i)
            w = self.cap_weights[k]
            if any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
                raise ConfigError(f"capability weights of control {k} must be >= 0 and sum to 1")
        if any(w <= 0 for w in self.ctrl_weights):
            raise ConfigError("control weights must be positive")
        if not self.hard_controls <= set(range(len(self.items))):
            raise CatalogError("hard control set references unknown controls")

    def check_control(self, k: int) -> None:
        if not 0 <= k < len(self.items):
            raise CatalogError(f"unknown security control {k}")

    # -- serialization
    def to_dict(self) -> dict:
        return {
            "controls": [
                {
                    "id": k,
                    "weight": self.ctrl_weights[k],
                    "capabilities": [
                        {"id": l, "weight": self.cap_weights[k][l], "items": list(cap)}
                        for l, cap in enumerate(ctrl)
                    ],
                }
                for k, ctrl in enumerate(self.items)
            ],
            "hard_controls": sorted(self.hard_controls),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SecurityCatalog":
        ctrls = sorted(d["controls"], key=lambda c: c["id"])
        items = tuple(tuple(tuple(int(i) for i in cap["items"]) for cap in c["capabilities"]) for c in ctrls)
        cap_w = tuple(tuple(float(cap["weight"]) for cap in c["capabilities"]) for c in ctrls)
        ctrl_w = tuple(float(c.get("weight", 1.0)) for c in ctrls)
        return cls(items, cap_w, ctrl_w, frozenset(int(k) for k in d.get("hard_controls", [])))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SecurityCatalog":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class SecurityThresholds:
    """Discretization tables and the hard-constraint penalty.

    ``cap_bounds`` are the upper edges of the 25/50 bands; SR strictly above
    the last edge and below 100 maps to 75.
    """

    cap_bounds: tuple[float, float] = (33.0, 66.0)
    cap_levels: tuple[float, ...] = (0.0, 25.0, 50.0, 75.0, 100.0)
    ctrl_levels: tuple[float, float, float] = (0.0, 50.0, 100.0)
    p_constraint: float = DEFAULT_P_CONSTRAINT
    score_min: float = 0.0
    score_max: float = 100.0


DEFAULT_THRESHOLDS = SecurityThresholds()


def satisfaction_rate(cap_items: Iterable[int], server_cnf: frozenset[int] | set[int]) -> float:
    cap_items = set(cap_items)
    if not cap_items:
        raise CatalogError("capability has no configuration items")
    return 100.0 * len(cap_items & set(server_cnf)) / len(cap_items)


def cap_level(sr: float, th: SecurityThresholds = DEFAULT_THRESHOLDS) -> float:
    if not 0.0 <= sr <= 100.0:
        raise ValueError(f"satisfaction rate {sr} outside [0, 100]")
    lv = th.cap_levels
    if sr == 0.0:
        return lv[0]
    if sr == 100.0:
        return lv[4]
    if sr <= th.cap_bounds[0]:
        return lv[1]
    if sr <= th.cap_bounds[1]:
        return lv[2]
    return lv[3]


def ctrl_level(g: float, th: SecurityThresholds = DEFAULT_THRESHOLDS) -> float:
    if not 0.0 <= g <= 100.0:
        raise ValueError(f"control score {g} outside [0, 100]")
    if g == 0.0:
        return th.ctrl_levels[0]
    if g == 100.0:
        return th.ctrl_levels[2]
    return th.ctrl_levels[1]


def _weighted_mean(weights, values) -> float:
    w = np.asarray(weights, dtype=float)
    v = np.asarray(values, dtype=float)
    used = v[w > 0]
    # Uniform levels are returned exactly so the 0/100 boundaries survive rounding.
    if used.size and np.all(used == used[0]):
        return float(used[0])
    return float(np.dot(w, v) / w.sum())


def control_score(k: int, server_cnf, catalog: SecurityCatalog,
                  th: SecurityThresholds = DEFAULT_THRESHOLDS) -> float:
    catalog.check_control(k)
    levels = [cap_level(satisfaction_rate(cap, server_cnf), th) for cap in catalog.items[k]]
    return _weighted_mean(catalog.cap_weights[k], levels)


def task_score_controls(controls: Iterable[int], server_cnf, catalog: SecurityCatalog,
                        th: SecurityThresholds = DEFAULT_THRESHOLDS) -> float:
    controls = sorted(controls)
    if not controls:
        raise CatalogError("task requires no security controls")
    for k in controls:
        catalog.check_control(k)
    levels = {k: ctrl_level(control_score(k, server_cnf, catalog, th), th) for k in controls}
    if any(levels[k] != th.ctrl_levels[2] for k in controls if k in catalog.hard_controls):
        return th.p_constraint
    return _weighted_mean([catalog.ctrl_weights[k] for k in controls], [levels[k] for k in controls])


def task_score(task, server, catalog: SecurityCatalog,
               th: SecurityThresholds = DEFAULT_THRESHOLDS) -> float:
    return task_score_controls(task.controls, server.config_items, catalog, th)


def service_score(assignment: Mapping[int, int], dag, infra, catalog: SecurityCatalog,
                  th: SecurityThresholds = DEFAULT_THRESHOLDS) -> float:
    scores = task_scores(assignment, dag, infra, catalog, th)
    return float(np.mean(scores))


def task_scores(assignment: Mapping[int, int], dag, infra, catalog: SecurityCatalog,
                th: SecurityThresholds = DEFAULT_THRESHOLDS) -> np.ndarray:
    missing = [t.id for t in dag.tasks if t.id not in assignment]
    if missing:
        raise IncompleteDeploymentError(f"tasks {missing} are not assigned")
    sc = SecurityScorer(infra, catalog, th)
    return np.array([sc.score(t.controls, assignment[t.id]) for t in dag.tasks])


class SecurityScorer:
    """Vectorized scoring over a fixed fleet.

    Control levels depend only on (server, control), so they are computed once
    as an ``(R, n_controls)`` table.
    """

    def __init__(self, infra, catalog: SecurityCatalog,
                 th: SecurityThresholds = DEFAULT_THRESHOLDS):
        self.catalog = catalog
        self.th = th
        n = catalog.n_controls
        self.ctrl_levels = np.zeros((len(infra.servers), n))
        self.ctrl_scores = np.zeros((len(infra.servers), n))
        for r, srv in enumerate(infra.servers):
            for k in range(n):
                g = control_score(k, srv.config_items, catalog, th)
                self.ctrl_scores[r, k] = g
                self.ctrl_levels[r, k] = ctrl_level(g, th)
        self.ctrl_weights = np.asarray(catalog.ctrl_weights, dtype=float)
        self.full = self.ctrl_levels == th.ctrl_levels[2]

    def scores_all(self, controls: Iterable[int]) -> np.ndarray:
        """Task score on every server, shape ``(R,)``."""
        ks = sorted(controls)
        if not ks:
            raise CatalogError("task requires no security controls")
        for k in ks:
            self.catalog.check_control(k)
        lv = self.ctrl_levels[:, ks]
        w = self.ctrl_weights[ks]
        out = lv @ w / w.sum()
        uniform = np.all(lv == lv[:, :1], axis=1)
        out[uniform] = lv[uniform, 0]
        hard = [i for i, k in enumerate(ks) if k in self.catalog.hard_controls]
        if hard:
            ok = np.all(self.full[:, ks][:, hard], axis=1)
            out[~ok] = self.th.p_constraint
        return out

    def hard_ok_all(self, controls: Iterable[int]) -> np.ndarray:
        hard = [k for k in controls if k in self.catalog.hard_controls]
        if not hard:
            return np.ones(self.full.shape[0], dtype=bool)
        return np.all(self.full[:, hard], axis=1)

    def score(self, controls: Iterable[int], server: int) -> float:
        return float(self.scores_all(controls)[server])
