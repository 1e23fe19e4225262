import pytest

_RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def criterion():
    """Record one acceptance verdict; the terminal summary prints them all."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _RESULTS[number] = (bool(ok), detail)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        ok, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
