"""Collect acceptance verdict lines and echo them after the test summary."""

from pathlib import Path

REPORT_PATH = Path(__file__).parent / ".acceptance_report.txt"


def pytest_sessionstart(session):
    if REPORT_PATH.exists():
        REPORT_PATH.unlink()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if REPORT_PATH.exists():
        terminalreporter.section("acceptance criteria")
        for line in REPORT_PATH.read_text().splitlines():
            terminalreporter.write_line(line)
