import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting: one PASS/FAIL line per criterion ---------------------------------

_CRITERIA: dict[str, tuple[int, str]] = {}
_OUTCOMES: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _CRITERIA[item.nodeid] = (int(mark.args[0]), str(mark.args[1]))


def pytest_runtest_logreport(report):
    if report.nodeid not in _CRITERIA:
        return
    number = _CRITERIA[report.nodeid][0]
    if report.failed:
        _OUTCOMES[number] = "FAIL"
    elif report.when == "call" and report.passed:
        _OUTCOMES.setdefault(number, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    titles = {n: t for n, t in _CRITERIA.values()}
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        terminalreporter.write_line(f"criterion {number:2d} {_OUTCOMES[number]}  {titles[number]}")
