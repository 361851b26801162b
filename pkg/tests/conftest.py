import re

import pytest

_verdicts: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record and print the one-line PASS/FAIL verdict of an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        _verdicts[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_verdicts):
        terminalreporter.write_line(_verdicts[number])
    failed = [n for n, line in _verdicts.items() if re.match("FAIL", line)]
    terminalreporter.write_line(f"{len(_verdicts) - len(failed)} passed, {len(failed)} failed")
