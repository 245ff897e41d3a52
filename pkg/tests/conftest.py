import numpy as np
import pytest

_VERDICTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def note(request):
    """Attach a one-line measurement summary to an acceptance verdict."""
    def add(text):
        request.node.user_properties.append(("note", text))
    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    num, title = mark.args
    notes = "; ".join(v for k, v in item.user_properties if k == "note")
    prev_ok, _, prev_notes = _VERDICTS.get(num, (True, title, ""))
    notes = "; ".join(t for t in (prev_notes, notes) if t)
    _VERDICTS[num] = (prev_ok and rep.passed, title, notes)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(_VERDICTS):
        ok, title, notes = _VERDICTS[num]
        line = f"criterion {num:2d} {'PASS' if ok else 'FAIL'}  {title}"
        tr.write_line(line + (f"  [{notes}]" if notes else ""))
