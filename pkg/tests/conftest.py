"""Shared pytest wiring: a one-line verdict per acceptance criterion."""
import re

_CRITERION = re.compile(r"test_acceptance\.py::\w+::test_(\d{2})_(\w+)")


def pytest_terminal_summary(terminalreporter):
    rows = []
    for bucket in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(bucket, []):
            if getattr(report, "when", None) != "call":
                continue
            match = _CRITERION.search(report.nodeid)
            if match is None:
                continue
            verdict = "PASS" if report.passed else "FAIL"
            rows.append((match.group(1), match.group(2).replace("_", " "), verdict))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for number, label, verdict in sorted(rows):
        terminalreporter.write_line(f"[ACCEPTANCE {number}] {label}: {verdict}")
