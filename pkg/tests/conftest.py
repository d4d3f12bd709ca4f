import os

import pytest
from hypothesis import HealthCheck, settings

from merton_pgdpo.model import Domain, MarketParams

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def market():
    return MarketParams()


@pytest.fixture
def domain():
    return Domain()


_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line: verdict(label, name, ok, detail).

    ``ok`` is True, False or None (skipped).  Failed criteria also fail the
    test; a skip is raised by the caller after recording.
    """
    store = request.config.stash.setdefault(_VERDICTS, {})

    def record(label, name: str, ok, detail: str = ""):
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[ok]
        label = str(label)
        store[label] = f"criterion {label:<8} {status}  {name}: {detail}"
        if ok is False:
            pytest.fail(store[label], pytrace=False)

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(_VERDICTS, {})
    if store:
        terminalreporter.section("acceptance")
        def order(label):
            head = label.split()[0]
            return (int(head) if head.isdigit() else 99, label)

        for label in sorted(store, key=order):
            terminalreporter.write_line(store[label])
