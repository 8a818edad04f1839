import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from fogplace.environment import Fleet  # noqa: E402
from fogplace.infrastructure import ServerNode, Infrastructure, generate_infrastructure  # noqa: E402
from fogplace.security import SecurityCatalog  # noqa: E402
from fogplace.workload import Edge, ServiceDag, Task  # noqa: E402

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def record_criterion(n: int, status: str, detail: str) -> None:
    _ACCEPTANCE[n] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status:4s}  {detail}")


@pytest.fixture(scope="session")
def catalog():
    return SecurityCatalog.default()


@pytest.fixture(scope="session")
def toy_infra(catalog):
    return generate_infrastructure((4, 8, 13), seed=11, catalog=catalog)


@pytest.fixture(scope="session")
def toy_fleet(toy_infra, catalog):
    return Fleet(toy_infra, catalog)


def all_items(catalog, controls):
    return {i for k in controls for cap in catalog.items[k] for i in cap}


def make_server(i, mips=10_000.0, mem=4096.0, storage=4096.0, x=0.0, y=0.0, iface=100.0,
                items=frozenset(), tier="fog"):
    return ServerNode(i, tier, i, 1, float(mips), float(mem), float(storage), float(x), float(y),
                      float(iface), frozenset(items))


def make_infra(servers):
    return Infrastructure(tuple(servers))


def chain(k, cpu=100.0, kb=100.0, deadline=1e9, controls=frozenset({5}), mem=10.0, storage=10.0):
    tasks = tuple(Task(h, cpu, mem, storage, deadline, frozenset(controls)) for h in range(k))
    edges = tuple(Edge(h, h + 1, kb) for h in range(k - 1))
    return ServiceDag(tasks, edges, id=f"chain{k}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
