import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

# (criterion id, description, passed, detail) filled in by test_acceptance.py;
# passed is None for a criterion that was not run
ACCEPTANCE_RESULTS = []


@pytest.fixture
def record_criterion():
    def record(cid, description, passed, detail=""):
        ACCEPTANCE_RESULTS.append((cid, description, None if passed is None else bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid, desc, ok, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: (int(r[0].split(".")[0]), r[0])):
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        line = f"[{status}] {cid}: {desc}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
