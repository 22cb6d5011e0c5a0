import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vageo.data import synth_generate  # noqa: E402

SMALL_REF = (64, 64)
SMALL_QUERY = {"ground": (32, 64), "drone": (32, 32)}


@pytest.fixture(scope="session")
def drone_set(tmp_path_factory):
    out = tmp_path_factory.mktemp("drone")
    return synth_generate(8, 3, "drone", out)


@pytest.fixture(scope="session")
def small_ground_set(tmp_path_factory):
    out = tmp_path_factory.mktemp("ground_small")
    return synth_generate(6, 5, "ground", out, SMALL_REF, SMALL_QUERY["ground"])


ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py::test_criterion_" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        ACCEPTANCE[name] = (report.outcome.upper(), report.duration)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda n: int(n.split("_")[2])):
        outcome, seconds = ACCEPTANCE[name]
        terminalreporter.write_line(f"{outcome:<7} {name}  ({seconds:.2f}s)")
