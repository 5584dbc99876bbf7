import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import lines

    verdicts = lines()
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for text in verdicts:
            terminalreporter.write_line(text)
