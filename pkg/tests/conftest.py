from __future__ import annotations

import pytest

from diafactor.annotation import ConversationStructure, Segment, Slot, Timeline

# seven-slot worked example: A A A B B A A, gapless
WORKED_ROLES = "AAABBAA"
WORKED_DURATIONS = (3.0, 2.0, 4.0, 1.5, 0.5, 6.0, 2.0)


def worked_structure(structure_id: str = "worked") -> ConversationStructure:
    return ConversationStructure(
        structure_id, tuple(Slot(r, d) for r, d in zip(WORKED_ROLES, WORKED_DURATIONS))
    )


def worked_timelines(a: str = "A", b: str = "B", rid: str = "worked") -> tuple[Timeline, Timeline]:
    """Reference and a hypothesis with the first B segment labelled as A."""
    ref, hyp = [], []
    t = 0.0
    first_b = True
    for role, d in zip(WORKED_ROLES, WORKED_DURATIONS):
        label = a if role == "A" else b
        ref.append(Segment(t, d, label))
        if role == "B" and first_b:
            hyp.append(Segment(t, d, a))
            first_b = False
        else:
            hyp.append(Segment(t, d, label))
        t += d
    return Timeline(rid, tuple(ref)), Timeline(rid, tuple(hyp))


@pytest.fixture
def worked():
    return worked_structure()


# one summary line per acceptance criterion, whatever the capture mode
_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _CRITERIA[number] = ("PASS" if report.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[number]
        line = f"[{status}] {number}. {title}"
        terminalreporter.write_line(line + (f" -- {detail}" if detail else ""))
