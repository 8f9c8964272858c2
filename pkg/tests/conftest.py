def pytest_terminal_summary(terminalreporter):
    from tests import test_acceptance

    lines = test_acceptance.criterion_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
