import re
from functools import lru_cache

import pytest

from msat_snn.data import make_blobs
from msat_snn.model import record_profile, train_toy_mlp

_CRITERION = re.compile(r"test_criterion_(\d+)_")
_results: dict[int, list[str]] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if m is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _results.setdefault(int(m.group(1)), []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        ok = all(o == "passed" for o in _results[n])
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}")


@lru_cache(maxsize=None)
def blobs_pipeline(seed: int = 0):
    """Toy 2-16-4 MLP on 4-class blobs (2000 train / 500 eval) and its train-set profile."""
    train = make_blobs(2000, 4, seed=seed)
    evaluation = make_blobs(500, 4, seed=1000 + seed)
    model = train_toy_mlp(train, [2, 16, 4], epochs=50, lr=0.05, seed=seed)
    profile = record_profile(model, train)
    return model, profile, train, evaluation


@pytest.fixture(scope="session")
def desk_mlp():
    return blobs_pipeline(0)
