import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> (passed, gating, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, gating, detail = ACCEPTANCE[n]
        tag = "PASS" if ok else "FAIL"
        suffix = "" if gating else " (reported, not gating)"
        terminalreporter.write_line(f"criterion {n}: {tag}{suffix}: {detail}")
