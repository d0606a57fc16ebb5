def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion at the end of the run."""
    outcomes = {}
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance" not in nodeid or "::" not in nodeid:
                continue
            name = nodeid.split("::")[-1]
            if status == "passed" and getattr(rep, "when", "call") != "call":
                continue
            if status == "passed":
                outcomes.setdefault(name, "PASS")
            else:
                outcomes[name] = "FAIL"
    if outcomes:
        terminalreporter.write_sep("=", "acceptance criteria")
        for name in sorted(outcomes):
            terminalreporter.write_line(f"{outcomes[name]}  {name}")
