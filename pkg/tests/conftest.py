import re

_CRITERIA: dict[int, dict] = {}
_NAME = re.compile(r"test_criterion_(\d+)")


def pytest_runtest_logreport(report):
    m = _NAME.search(report.nodeid)
    if not m:
        return
    if report.when != "call" and not (report.failed or report.skipped):
        return
    entry = _CRITERIA.setdefault(int(m.group(1)), {"ok": True, "details": []})
    if report.failed or report.skipped:
        entry["ok"] = False
    for key, value in report.user_properties:
        if key == "detail":
            entry["details"].append(value)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        line = f"criterion {n:2d}: {'PASS' if e['ok'] else 'FAIL'}"
        if e["details"]:
            line += "  " + "; ".join(e["details"])
        terminalreporter.write_line(line)
