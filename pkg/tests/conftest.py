import os

import pytest
import torch

from dermsynth.fixtures import write_fixture_corpus
from dermsynth.types import load_taxonomy

torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))


@pytest.fixture(scope="session")
def taxonomy():
    return load_taxonomy()


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """Procedural D7P/HAM-shaped corpus written once per session."""
    root = tmp_path_factory.mktemp("corpus")
    return write_fixture_corpus(root, seed=0)


_CRITERIA = []


@pytest.fixture
def criterion(request):
    """Context manager that times a block and records a PASS/FAIL line for the summary."""
    import contextlib
    import time

    @contextlib.contextmanager
    def record(name):
        t0 = time.perf_counter()
        status = "FAIL"
        try:
            yield
            status = "PASS"
        finally:
            line = f"{status} | {name} | {time.perf_counter() - t0:.1f}s"
            _CRITERIA.append(line)
            print("\n" + line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
