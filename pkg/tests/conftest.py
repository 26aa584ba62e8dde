"""Collects one verdict line per acceptance criterion and prints them at the end."""

VERDICTS: dict[str, str] = {}


def record(criterion: int, title: str, passed: bool, detail: str = "") -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {title}"
    if detail:
        line += f" | {detail}"
    VERDICTS[f"{criterion:02d}"] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[key])
