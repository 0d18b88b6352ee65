import json

import pytest

from edgepipe.config import fixture
from edgepipe.model import EncoderConfig

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def fleet_doc():
    """The shipped reference fleet config as a fresh dict."""
    return fixture("reference_fleet")


@pytest.fixture
def small_cfg():
    return EncoderConfig(layers=2, heads=4, d_model=16, d_ff=32, vocab=16, seq_len=6, classes=4, seed=3)


@pytest.fixture
def write_config(tmp_path):
    def write(doc, name="config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(doc))
        return path

    return write
