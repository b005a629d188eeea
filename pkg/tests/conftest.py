import pytest

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    def record(cid: str, title: str, passed: bool, detail: str) -> None:
        ACCEPTANCE[cid] = (title, bool(passed), detail)
        print(f"\n[{'PASS' if passed else 'FAIL'}] {cid} {title}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=lambda c: int(c[1:])):
        title, passed, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"{cid} {'PASS' if passed else 'FAIL'} {title}: {detail}")
