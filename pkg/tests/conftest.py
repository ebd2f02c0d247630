import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# filled by test_acceptance.py: (number, title, status, detail)
ACCEPTANCE: list[tuple[int, str, str, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, status, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{status:4s} criterion {num:2d}: {title} ({detail})")
