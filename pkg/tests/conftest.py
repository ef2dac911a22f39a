import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """``criterion(label, ok, detail)`` logs one summary line, then asserts ``ok``."""
    def record(label, ok, detail=""):
        ACCEPTANCE_LINES.append(f"criterion {label}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip())
        assert ok, f"criterion {label}: {detail}"
    return record


def pytest_addoption(parser):
    parser.addoption("--run-benchmarks", action="store_true", default=False,
                     help="run the hours-long SIM / Tuebingen benchmark criteria")
    parser.addoption("--sim-dir", default=os.environ.get("LSNMFLOW_SIM_DIR"))
    parser.addoption("--tuebingen-dir", default=os.environ.get("LSNMFLOW_TUEBINGEN_DIR"))


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-benchmarks") or os.environ.get("LSNMFLOW_RUN_BENCHMARKS") == "1":
        return
    skip = pytest.mark.skip(reason="benchmark criterion: opt in with --run-benchmarks")
    for item in items:
        if "benchmark" in item.keywords:
            item.add_marker(skip)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":").split("(")[0])):
        terminalreporter.write_line(line)
