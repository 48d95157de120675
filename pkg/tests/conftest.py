import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from qckpt.kernels import available_backends  # noqa: E402

BACKENDS = sorted(available_backends())


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    """Run a test once per kernel backend by swapping the dispatch table."""
    import qckpt.kernels as k

    impl = available_backends()[request.param]
    for name in ("rle_encode", "rle_decode", "huffman_pack", "huffman_unpack", "lloyd_step", "assign_nearest"):
        monkeypatch.setattr(k, name, getattr(impl, name))
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
