import os
import sys

from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_VERDICTS = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: long-running acceptance criteria")


def record_verdict(number: int, passed: bool, detail: str) -> None:
    _VERDICTS.append((number, passed, detail))
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(_VERDICTS):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
