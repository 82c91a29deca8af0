import functools

import numpy as np
import pytest

from spacetrace.march import MarchOptions, run_march
from spacetrace.mesh import build_time_partition, build_uniform_mesh

DOMAIN = (-2.0, 2.0, -2.0, 2.0)


@functools.lru_cache(maxsize=None)
def mesh_at(h):
    return build_uniform_mesh(DOMAIN, h)


def march(problem, h, N, **opts):
    return run_march(problem, mesh_at(h), build_time_partition(problem.T, N), MarchOptions(**opts))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# acceptance verdict lines, repeated in the terminal summary so they survive output capture
VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    def record(tag, ok, detail):
        line = f"{tag}: {'PASS' if ok else 'FAIL'} {detail}"
        VERDICTS.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance")
        for line in VERDICTS:
            terminalreporter.write_line(line)
