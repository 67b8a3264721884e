import re

_CRITERION_RE = re.compile(r"test_criterion_(\d+)")


def pytest_runtest_logreport(report):
    """One visible pass/fail line per acceptance criterion."""
    match = _CRITERION_RE.search(report.nodeid)
    if match and report.when == "call":
        outcome = "PASS" if report.passed else "FAIL"
        print(f"\n[ACCEPTANCE] criterion {int(match.group(1)):2d}: {outcome}")
