"""Three-tier server fleet, network model and security inventories."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Mapping

import numpy as np

from .security import SecurityCatalog

CLOUD, FOG, IOT = "cloud", "fog", "iot"
TIERS = (CLOUD, FOG, IOT)

DEFAULT_PROP_SPEED = 2e8  # m/s
DEFAULT_AREA = 100_000.0  # m, square side
GB = 1024.0


@dataclass(frozen=True)
class TierProfile:
    cores: tuple[int, int]
    mips_per_core: tuple[float, float]
    mem_gb: tuple[float, float]
    storage_gb: tuple[float, float]
    iface_mbps: tuple[float, float]
    security_p: float


TIER_PROFILES: dict[str, TierProfile] = {
    CLOUD: TierProfile((4, 32), (10_000, 100_000), (16, 128), (500, 10_000), (100, 1000), 0.9),
    FOG: TierProfile((2, 8), (5_000, 20_000), (4, 32), (200, 500), (50, 200), 0.6),
    IOT: TierProfile((1, 2), (1_000, 5_000), (1, 2), (10, 100), (10, 50), 0.3),
}


@dataclass(frozen=True)
class ServerNode:
    id: int
    tier: str
    index: int
    cores: int
    mips: float  # aggregate over cores
    mem_mb: float
    storage_mb: float
    x: float
    y: float
    iface_mbps: float
    config_items: frozenset[int] = frozenset()

    def to_dict(self) -> dict:
        return {
            "id": self.id, "tier": self.tier, "index": self.index, "cores": self.cores,
            "mips": self.mips, "mem_mb": self.mem_mb, "storage_mb": self.storage_mb,
            "x": self.x, "y": self.y, "iface_mbps": self.iface_mbps,
            "config_items": sorted(self.config_items),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ServerNode":
        return cls(int(d["id"]), str(d["tier"]), int(d["index"]), int(d["cores"]),
                   float(d["mips"]), float(d["mem_mb"]), float(d["storage_mb"]),
                   float(d["x"]), float(d["y"]), float(d["iface_mbps"]),
                   frozenset(int(i) for i in d["config_items"]))


@dataclass(frozen=True)
class Infrastructure:
    servers: tuple[ServerNode, ...]
    prop_speed: float = DEFAULT_PROP_SPEED
    area: float = DEFAULT_AREA

    def __len__(self) -> int:
        return len(self.servers)

    @cached_property
    def mips(self) -> np.ndarray:
        return np.array([s.mips for s in self.servers])

    @cached_property
    def mem(self) -> np.ndarray:
        return np.array([s.mem_mb for s in self.servers])

    @cached_property
    def storage(self) -> np.ndarray:
        return np.array([s.storage_mb for s in self.servers])

    @cached_property
    def coords(self) -> np.ndarray:
        return np.array([[s.x, s.y] for s in self.servers]).reshape(-1, 2)

    @cached_property
    def iface(self) -> np.ndarray:
        return np.array([s.iface_mbps for s in self.servers])

    @cached_property
    def bandwidth_matrix(self) -> np.ndarray:
        """Mbps; diagonal entries are never used (co-located transfers are free)."""
        return np.minimum.outer(self.iface, self.iface)

    @cached_property
    def delay_matrix(self) -> np.ndarray:
        """Propagation delay in ms."""
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        return np.sqrt((diff ** 2).sum(-1)) / self.prop_speed * 1000.0

    @cached_property
    def mean_mips(self) -> float:
        return float(self.mips.mean())

    @cached_property
    def mean_bandwidth(self) -> float:
        r = len(self.servers)
        if r < 2:
            return float(self.iface.mean())
        off = ~np.eye(r, dtype=bool)
        return float(self.bandwidth_matrix[off].mean())

    def _check(self, i: int) -> None:
        if not 0 <= i < len(self.servers):
            raise KeyError(f"unknown server id {i}")

    def bandwidth(self, i: int, j: int) -> float:
        self._check(i)
        self._check(j)
        return float(self.bandwidth_matrix[i, j])

    def propagation_delay(self, i: int, j: int) -> float:
        self._check(i)
        self._check(j)
        return float(self.delay_matrix[i, j])

    def tier_indices(self, tier: str) -> list[int]:
        return [s.id for s in self.servers if s.tier == tier]

    def to_dict(self) -> dict:
        return {"prop_speed_mps": self.prop_speed, "area_m": self.area,
                "servers": [s.to_dict() for s in self.servers]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Infrastructure":
        servers = tuple(ServerNode.from_dict(s) for s in d["servers"])
        if [s.id for s in servers] != list(range(len(servers))):
            raise ValueError("server ids must be 0..R-1 in order")
        return cls(servers, float(d.get("prop_speed_mps", DEFAULT_PROP_SPEED)),
                   float(d.get("area_m", DEFAULT_AREA)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Infrastructure":
        return cls.from_dict(json.loads(Path(path).read_text()))


def draw_config_items(rng: np.random.Generator, catalog: SecurityCatalog, p: float,
                      mode: str = "control") -> frozenset[int]:
    """Enabled configuration items for one server.

    ``mode="control"``: each control is fully implemented with probability
    ``p``; otherwise each of its items is enabled independently with
    probability ``p``. ``mode="item"``: every item independently with ``p``.
    """
    enabled: set[int] = set()
    for ctrl in catalog.items:
        items = [i for cap in ctrl for i in cap]
        if mode == "control" and rng.random() < p:
            enabled.update(items)
            continue
        mask = rng.random(len(items)) < p
        enabled.update(i for i, m in zip(items, mask) if m)
    return frozenset(enabled)


def generate_infrastructure(
    counts: Mapping[str, int] | tuple[int, int, int] = (20, 30, 50),
    area: float = DEFAULT_AREA,
    seed: int = 0,
    catalog: SecurityCatalog | None = None,
    prop_speed: float = DEFAULT_PROP_SPEED,
    security_p: Mapping[str, float] | None = None,
    cnf_mode: str = "control",
) -> Infrastructure:
    if not isinstance(counts, Mapping):
        counts = dict(zip(TIERS, counts))
    if any(counts.get(t, 0) < 0 for t in TIERS):
        raise ValueError("server counts must be non-negative")
    if area <= 0:
        raise ValueError("area must be positive")
    if cnf_mode not in ("control", "item"):
        raise ValueError(f"unknown cnf_mode {cnf_mode!r}")
    catalog = catalog or SecurityCatalog.default()
    rng = np.random.default_rng(seed)
    servers = []
    for tier in TIERS:
        prof = TIER_PROFILES[tier]
        p_sec = (security_p or {}).get(tier, prof.security_p)
        for q in range(counts.get(tier, 0)):
            cores = int(rng.integers(prof.cores[0], prof.cores[1] + 1))
            servers.append(
                ServerNode(
                    id=len(servers), tier=tier, index=q, cores=cores,
                    mips=cores * float(rng.uniform(*prof.mips_per_core)),
                    mem_mb=float(rng.uniform(*prof.mem_gb)) * GB,
                    storage_mb=float(rng.uniform(*prof.storage_gb)) * GB,
                    x=float(rng.uniform(0, area)), y=float(rng.uniform(0, area)),
                    iface_mbps=float(rng.uniform(*prof.iface_mbps)),
                    config_items=draw_config_items(rng, catalog, p_sec, cnf_mode),
                )
            )
    return Infrastructure(tuple(servers), prop_speed, area)
