import pytest

# criterion id -> (passed, detail); filled by the acceptance tests
ACCEPTANCE = {}


@pytest.fixture
def record():
    """``record(cid, passed, detail)`` stores one acceptance line."""

    def _record(cid, passed, detail):
        prev = ACCEPTANCE.get(cid)
        ok = bool(passed) and (prev is None or prev[0])
        text = detail if prev is None else f"{prev[1]}; {detail}"
        ACCEPTANCE[cid] = (ok, text)
        return bool(passed)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=int):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {cid}: {detail}")
