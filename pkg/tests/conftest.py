import sys


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    summary = getattr(module, "SUMMARY", None)
    if not summary:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(summary):
        terminalreporter.write_line(summary[number])
