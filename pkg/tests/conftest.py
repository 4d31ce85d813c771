from __future__ import annotations

import pytest

from tierfs.cluster import Cluster


def make_cluster(root, nodes=3, chunk_size=1024, **kw) -> Cluster:
    c = Cluster(root, chunk_size=chunk_size, **kw)
    for i in range(nodes):
        c.join(f"n{i + 1}")
    return c


@pytest.fixture
def cluster(tmp_path):
    return make_cluster(tmp_path / "c")


@pytest.fixture
def session(cluster):
    return cluster.session("client")


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
