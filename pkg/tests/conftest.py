import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from helpers import knn_weights  # noqa: E402

from logshe import LogSheModel, simulate  # noqa: E402

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def w30():
    return knn_weights(30, 4, seed=1)


@pytest.fixture(scope="session")
def sar_data():
    W = knn_weights(200, 5, seed=2)
    model = LogSheModel.create("SAR", W)
    data = simulate(model, [0.3, 1.0, 3.0, 3.0], seed=11)
    return model, data
