"""Acceptance bookkeeping: tests tagged ``@pytest.mark.criterion(n)`` roll up
into one pass/fail line per criterion at the end of the run."""

import pytest

CRITERIA = {
    1: "gradient suite",
    2: "degeneracy identities",
    3: "aggregation order",
    4: "weight-space interpolation",
    5: "hard-negative generator contracts",
    6: "ablation trend at desk scale",
    7: "metric sanity at chance",
    8: "checkpoint serialization",
}

_outcomes: dict[int, list[tuple[str, str]]] = {n: [] for n in CRITERIA}


_notes: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): counts toward acceptance criterion n")


@pytest.fixture(scope="session")
def acceptance_notes():
    """Lines appended here are echoed under the acceptance summary."""
    return _notes


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    # a failed setup never reaches "call"; record it so the criterion fails
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _outcomes[marker.args[0]].append((item.nodeid, report.outcome))


def pytest_terminal_summary(terminalreporter):
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, name in CRITERIA.items():
        runs = _outcomes[n]
        if not runs:
            tr.write_line(f"criterion {n} ({name}): NOT RUN")
            continue
        failed = [nodeid for nodeid, outcome in runs if outcome != "passed"]
        status = "FAIL" if failed else "PASS"
        tr.write_line(f"criterion {n} ({name}): {status}  [{len(runs) - len(failed)}/{len(runs)} checks]")
        for nodeid in failed:
            tr.write_line(f"    failed: {nodeid}")
    for line in _notes:
        tr.write_line(line)
