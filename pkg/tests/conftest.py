from hypothesis import settings

settings.register_profile("lanerl", deadline=None, max_examples=60)
settings.load_profile("lanerl")


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, in criterion order."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call":
                continue
            props = dict(rep.user_properties)
            if "criterion" in props:
                lines.append((props["criterion"], outcome.upper()[:4], props.get("detail", "")))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n, verdict, detail in sorted(lines):
        terminalreporter.write_line(f"{verdict} criterion {n}: {detail}")
