import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_collection_modifyitems(config, items):
    # acceptance runs train real models; keep them last so quick failures surface first
    items.sort(key=lambda it: "test_acceptance" in it.nodeid)


_CRITERIA = {}


@pytest.fixture(scope="session")
def criterion():
    """Record one pass/fail line per acceptance criterion."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA.setdefault(number, []).append((ok, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok = all(o for o, _ in _CRITERIA[n])
        details = "; ".join(line.split("  ", 1)[1] for _, line in _CRITERIA[n])
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {details}")
