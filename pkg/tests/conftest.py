import re
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with the measured values."""
    rows = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = _CRITERION.search(getattr(rep, "nodeid", ""))
            if not m:
                continue
            n = int(m.group(1))
            ok = outcome == "passed" and rows.get(n, (True,))[0]
            detail = "; ".join(f"{k}={v}" for k, v in getattr(rep, "user_properties", []))
            if rep.when == "call" or n not in rows:
                rows[n] = (ok, m.group(2).replace("_", " "), detail)
            elif not ok:
                rows[n] = (False,) + rows[n][1:]
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(rows):
        ok, title, detail = rows[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}"
                                    + (f"  [{detail}]" if detail else ""))
