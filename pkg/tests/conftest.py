"""Shared pytest plumbing: the acceptance suite records one verdict per criterion."""

ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        verdict, text = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d}: {verdict}  {text}")
