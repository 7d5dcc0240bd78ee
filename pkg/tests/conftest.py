"""Shared pytest plumbing: the acceptance-criteria PASS/FAIL summary.

test_acceptance.py registers one result per criterion through
record_acceptance; the hook below prints them as a dedicated section at the
end of the run so the verdict survives output capturing.
"""

_acceptance_results: list[tuple[str, bool]] = []


def record_acceptance(name: str, passed: bool) -> None:
    _acceptance_results.append((name, passed))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed in _acceptance_results:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}")
