import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from osuda import segmentor as seg  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_cfg():
    return seg.SegmentorConfig(widths=(2, 3, 3, 3), strides=(2, 1, 2, 1), num_classes=3)


def pytest_terminal_summary(terminalreporter):
    from registry import RESULTS as ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split(".")[0])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {key}: {detail}")
