import numpy as np
import pytest

# criterion id -> (passed, detail); filled by the acceptance module
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=lambda c: int(c[1:])):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"{cid} {'PASS' if ok else 'FAIL'}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
