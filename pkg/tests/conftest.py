import numpy as np
import pytest

from upmdp_cert.model import parse_model


def two_state_doc(expr="p", kind="reach"):
    """State 0 moves to the target 1 with ``expr`` and stays otherwise."""
    return {
        "states": 2,
        "initial": {"0": 1.0},
        "actions": {"0": ["go"], "1": ["stay"]},
        "parameters": {"p": {"dist": "beta", "a": 2, "b": 2}},
        "transitions": [
            {"s": 0, "a": "go", "to": 1, "expr": expr},
            {"s": 0, "a": "go", "to": 0, "expr": f"1 - {expr}" if expr == "p" else "1 - p"},
            {"s": 1, "a": "stay", "to": 1, "expr": "1"},
        ],
        "objective": {"kind": kind, "target": [1], "direction": "max"},
    }


@pytest.fixture
def two_state():
    return parse_model(two_state_doc())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
