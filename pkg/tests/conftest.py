import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from flgpr.dataset import LaneSpec, generate_lane

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def small_spec(lane_id="S", length_m=12.0, width_m=3.0, n_targets=3, seed=7, **kw):
    return LaneSpec(lane_id, length_m, width_m, n_targets, seed=seed, **kw)


@pytest.fixture(scope="session")
def small_lane():
    return generate_lane(small_spec())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary ------------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None:
        return
    n, title = m.args
    failed = rep.failed or (rep.when == "call" and rep.skipped)
    prev = _CRITERIA.get(n, (title, "PASS", ""))
    if failed:
        _CRITERIA[n] = (title, "FAIL", str(rep.longrepr).splitlines()[-1][:120])
    elif rep.when == "call" and prev[1] != "FAIL":
        detail = getattr(item, "criterion_detail", "")
        _CRITERIA[n] = (title, "PASS", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"#{n:<2d} {status}  {title}" + (f"  [{detail}]" if detail else ""))
