import os

import pytest

# Results of the acceptance suite, keyed by criterion number.  Each entry is a
# list of (label, passed, detail); the terminal summary folds them into one
# line per criterion.
ACCEPTANCE = {}

os.environ.setdefault("MIPP_THREADS", "1")


def record(criterion, passed, detail, label=""):
    ACCEPTANCE.setdefault(criterion, []).append((label, bool(passed), detail))


@pytest.fixture
def acceptance():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[k]
        ok = all(p for _, p, _ in parts)
        if len(parts) == 1 and not parts[0][0]:
            detail = parts[0][2]
        else:
            detail = "; ".join(f"{lab}: {'ok' if p else 'FAIL'} {d}" for lab, p, d in parts)
        tr.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
