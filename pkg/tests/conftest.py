import re


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", getattr(rep, "nodeid", ""))
            if not m or rep.when not in ("call", "setup"):
                continue
            if rep.when == "setup" and outcome == "passed":
                continue
            detail = dict(rep.user_properties).get("detail", "")
            lines.append((int(m.group(1)), f"criterion {int(m.group(1)):>2} {m.group(2):<28} "
                                           f"{'PASS' if outcome == 'passed' else 'FAIL'}  {detail}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
