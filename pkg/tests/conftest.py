import functools
import sys
import warnings

import numpy as np
import pytest

from voxmatch.synth import synth_articulated


@functools.lru_cache(maxsize=None)
def shape(model, pose, sampling):
    return synth_articulated(model, pose, sampling)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_orthogonal(rng, k, det=None):
    """Haar-distributed orthogonal matrix (QR with sign fix); optionally force det."""
    q, r = np.linalg.qr(rng.standard_normal((k, k)))
    q = q * np.sign(np.diag(r))
    if det is not None and np.sign(np.linalg.det(q)) != det:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture(autouse=True)
def _quiet_duplicate_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("default")
        yield


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if not mod or not mod.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in mod.LINES:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {criterion}: {detail}")
