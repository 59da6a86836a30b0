import sys
import threading

import numpy as np
import pytest

from cfdsurrogate.collective import rendezvous
from cfdsurrogate.datagen import build_dataset, write_dataset
from cfdsurrogate.launch import free_port
from cfdsurrogate.model import ModelDims

DESK = dict(n_cases=16, timesteps=64, cells=256)
SMALL_DIMS = ModelDims(12, 3, 1, 8, 8, 5)


@pytest.fixture(scope="session")
def desk_dataset():
    return build_dataset(DESK["n_cases"], DESK["cells"], DESK["timesteps"], seed=0)


@pytest.fixture(scope="session")
def desk_file(desk_dataset, tmp_path_factory):
    path = tmp_path_factory.mktemp("desk") / "desk.bin"
    write_dataset(desk_dataset, path)
    return path


@pytest.fixture(scope="session")
def tiny_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("tiny") / "tiny.bin"
    write_dataset(build_dataset(10, 4, 16, seed=3), path)
    return path


def run_ranks(world, fn, timeout=60, address=None):
    """Run ``fn(group)`` on ``world`` threads joined through a real rendezvous."""
    address = address or f"127.0.0.1:{free_port()}"
    results, errors = [None] * world, [None] * world

    def body(rank):
        try:
            with rendezvous(world, address, rank, timeout=timeout) as group:
                results[rank] = fn(group)
        except BaseException as exc:  # noqa: BLE001 - surfaced below
            errors[rank] = exc

    threads = [threading.Thread(target=body, args=(r,)) for r in range(world)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout)
    for exc in errors:
        if exc is not None:
            raise exc
    return results


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
