"""Shared fixtures plus an end-of-run summary of acceptance criteria."""

_CRITERIA: list[tuple[str, bool, str]] = []


def record_criterion(name: str, passed: bool, detail: str = "") -> None:
    _CRITERIA.append((name, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name, passed, detail in _CRITERIA:
        line = f"[{'PASS' if passed else 'FAIL'}] {name}"
        if detail:
            line += f" — {detail}"
        tr.write_line(line)
