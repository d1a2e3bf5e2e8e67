"""Shared pytest plumbing: acceptance criteria report lines."""

ACCEPTANCE_RESULTS: list[tuple[int, str, bool, str]] = []
ACCEPTANCE_IDS = set(range(1, 13))


def record_criterion(criterion: int, description: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE_RESULTS.append((criterion, description, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    seen = set()
    for criterion, description, passed, detail in sorted(ACCEPTANCE_RESULTS):
        seen.add(criterion)
        status = "PASS" if passed else "FAIL"
        suffix = f" [{detail}]" if detail else ""
        terminalreporter.write_line(f"criterion {criterion:2d} {status}: {description}{suffix}")
    for missing in sorted(ACCEPTANCE_IDS - seen):
        terminalreporter.write_line(f"criterion {missing:2d} NOT RUN")
