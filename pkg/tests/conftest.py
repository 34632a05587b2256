import pytest

_RESULTS: dict = {}


class Acceptance:
    """Collects one verdict line per acceptance criterion."""

    def record(self, number: int, title: str, ok: bool, detail: str = "") -> bool:
        _RESULTS[number] = (title, ok, detail)
        print(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        return ok


@pytest.fixture(scope="session")
def acceptance():
    return Acceptance()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        title, ok, detail = _RESULTS[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}: {detail}")
