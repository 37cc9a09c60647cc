import pytest
from hypothesis import HealthCheck, settings

from transtrust.config import ScenarioConfig

settings.register_profile(
    "transtrust", deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("transtrust")


def scenario(name: str, *overrides: str) -> ScenarioConfig:
    config = ScenarioConfig().with_override(f"scenario.name={name}")
    for assignment in overrides:
        config = config.with_override(assignment)
    return config


@pytest.fixture
def make_config():
    return scenario


# -- acceptance criteria reporting ------------------------------------------

_CRITERIA: dict[str, tuple[int, str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): an acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    number, title = marker.args
    verdict = "pass" if report.passed else "fail"
    _CRITERIA[item.nodeid] = (number, title, verdict, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, verdict, duration in sorted(_CRITERIA.values()):
        terminalreporter.write_line(f"criterion {number} {title}: {verdict} ({duration:.2f}s)")
