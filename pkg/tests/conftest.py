"""Collects acceptance verdicts and prints one line per criterion at the end."""

import pytest

CRITERIA = {
    1: "Gaussian ground truth",
    2: "inequality suites",
    3: "M-matrix lemma",
    4: "Zegarlinski identity",
    5: "doubling identity",
    6: "moment lemma",
    7: "certifier soundness",
    8: "end-to-end pipeline",
}

_verdicts: dict = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    k = props.get("criterion")
    if k is None or not (report.when == "call" or report.failed):
        return
    detail = props.get("detail", "")
    crash = getattr(report.longrepr, "reprcrash", None)
    if report.failed and crash is not None:
        detail = f"{detail} [{crash.message.splitlines()[0]}]".strip()
    ok, details = _verdicts.get(k, (True, []))
    _verdicts[k] = (ok and report.passed, details + [detail] if detail else details)


@pytest.fixture
def criterion(request):
    """Tag the test with its criterion number; returns a function for the detail line."""
    marker = request.node.get_closest_marker("acceptance")
    request.node.user_properties.append(("criterion", marker.args[0]))

    def detail(text):
        request.node.user_properties.append(("detail", text))

    return detail


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k, name in CRITERIA.items():
        if k not in _verdicts:
            tr.write_line(f"criterion {k} ({name}): NOT RUN")
            continue
        ok, details = _verdicts[k]
        tr.write_line(f"criterion {k} ({name}): {'PASS' if ok else 'FAIL'}  {'; '.join(details)}")
