ACCEPTANCE_LINES = {}


def record_acceptance(key, ok, detail):
    ACCEPTANCE_LINES[key] = f"{key} {'PASS' if ok else 'FAIL'}: {detail}"
    print(ACCEPTANCE_LINES[key])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
