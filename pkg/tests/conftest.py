"""Shared pytest hooks: one summary line per acceptance criterion."""

# criterion number -> {"title": str, "ok": bool, "details": [str]}
_criteria = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props or (report.when != "call" and not report.failed):
        return
    entry = _criteria.setdefault(props["criterion"], {"title": props.get("title", ""), "ok": True, "details": []})
    entry["ok"] = entry["ok"] and not report.failed
    if props.get("detail"):
        entry["details"].append(props["detail"])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_criteria):
        entry = _criteria[key]
        line = f"criterion {key}: {'PASS' if entry['ok'] else 'FAIL'}  {entry['title']}"
        if entry["details"]:
            line += "  [" + "; ".join(entry["details"]) + "]"
        terminalreporter.write_line(line)
