import sys

ACCEPTANCE_LINES = {}


def record_acceptance(number, passed, text):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {text}"
    ACCEPTANCE_LINES[number] = line
    print(line, file=sys.__stdout__, flush=True)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
