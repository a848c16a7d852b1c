import os

from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

import re

import pytest

_CRIT = re.compile(r"test_criterion_(\d+)")


def pytest_configure(config):
    config._criteria = {}
    config._criteria_expected = set()


def pytest_collection_modifyitems(config, items):
    for it in items:
        m = _CRIT.match(it.name)
        if m:
            config._criteria_expected.add(int(m.group(1)))


@pytest.fixture
def criterion(request):
    """record(num, ok, detail) prints one line and keeps it for the terminal summary."""
    def record(num, ok, detail=""):
        line = f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        request.config._criteria[num] = line
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    nums = sorted(config._criteria_expected)
    if not nums:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in nums:
        terminalreporter.write_line(config._criteria.get(n, f"criterion {n:2d}: FAIL  (no result recorded)"))
