import sys


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, collected by test_acceptance."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for status, name, detail in lines:
        terminalreporter.write_line(f"{status:4}  {name}: {detail}")
