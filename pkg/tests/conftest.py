"""Shared pytest hooks: collects acceptance results and prints them after the run."""

ACCEPTANCE: dict[str, tuple[bool | None, str]] = {}


def record(name: str, ok: bool | None, detail: str = "") -> bool | None:
    """Store the outcome of one acceptance criterion (``None`` means skipped)."""
    ACCEPTANCE[name] = (ok, detail)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        terminalreporter.write_line(f"{status}  {name}: {detail}")
