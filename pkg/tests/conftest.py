"""Collects the one-line acceptance verdicts and prints them after the run,
outside pytest's capture, so the gate is visible in plain `pytest -v` output."""

_verdicts: list[str] = []


def record_verdict(line: str) -> None:
    _verdicts.append(line)


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.section("acceptance criteria")
        for line in _verdicts:
            terminalreporter.line(line)
