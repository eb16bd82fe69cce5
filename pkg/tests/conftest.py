import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=60, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report one line each; a criterion with several
# clauses passes only if every clause does
_CRITERIA = {}
CRITERION_NAMES = {
    1: "gradient suite", 2: "oracle equivalence", 3: "loss identities", 4: "ordering repair",
    5: "deformation degeneration", 6: "desk-scale end-to-end", 7: "ablation ordering",
    8: "determinism",
}


@pytest.fixture(scope="session")
def criterion_log():
    def record(number, clause, passed, detail=""):
        _CRITERIA.setdefault(number, []).append((clause, bool(passed), detail))
        print(f"criterion {number} {clause}: {'PASS' if passed else 'FAIL'} {detail}".rstrip())
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        clauses = _CRITERIA[number]
        ok = all(c[1] for c in clauses)
        failed = [f"{c[0]} ({c[2]})" for c in clauses if not c[1]]
        tail = "" if ok else " failing: " + "; ".join(failed)
        terminalreporter.write_line(
            f"{'PASS' if ok else 'FAIL'} criterion {number} {CRITERION_NAMES[number]}{tail}")
