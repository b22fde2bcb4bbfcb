import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_RESULTS: list[tuple[str, bool, str]] = []


def record(criterion: str, passed: bool, detail: str) -> None:
    """Log one acceptance line; printed immediately and again in the summary."""
    line = f"{criterion} {'PASS' if passed else 'FAIL'}: {detail}"
    _RESULTS.append((criterion, passed, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for _, _, line in sorted(_RESULTS, key=lambda r: int(r[0][1:])):
            terminalreporter.write_line(line)
