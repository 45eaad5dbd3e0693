"""Suite-wide hooks.

* Every call to ``gan.make_adversarial`` is audited: the output must be binary
  and keep every original feature. The acceptance check for monotonicity
  reads these counters, and the session fails if any violation was seen.
* Acceptance tests run after everything else so the audit covers the whole
  suite, and their one-line verdicts are repeated in the terminal summary.
"""

import numpy as np
import pytest

from mald2gan import gan

AUDIT = {"vectors": 0, "violations": 0}
VERDICTS: list[str] = []

_make_adversarial = gan.make_adversarial


def _audited(m, o):
    out = _make_adversarial(m, o)
    m_arr = np.asarray(m).astype(np.uint8).reshape(out.shape)
    bad = ~np.all((out & m_arr) == m_arr, axis=-1) | ~np.all((out == 0) | (out == 1), axis=-1)
    AUDIT["vectors"] += int(np.prod(out.shape[:-1])) if out.ndim > 1 else 1
    AUDIT["violations"] += int(np.sum(bad))
    return out


gan.make_adversarial = _audited


def pytest_collection_modifyitems(items):
    items.sort(key=lambda it: it.nodeid.startswith("tests/test_acceptance.py")
               or "test_acceptance.py" in it.nodeid)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
    terminalreporter.write_line(f"adversarial vectors audited: {AUDIT['vectors']}, "
                                f"monotonicity violations: {AUDIT['violations']}")


def pytest_sessionfinish(session, exitstatus):
    if AUDIT["violations"]:
        session.exitstatus = pytest.ExitCode.TESTS_FAILED
