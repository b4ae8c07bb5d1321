import numpy as np
import pytest

from sarfuse.tensor import tensor


def hp(data, grad=True):
    """High-precision tensor for gradient checks."""
    return tensor(np.asarray(data, dtype=np.float64), requires_grad=grad, precision="high")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_benchmark(tmp_path_factory):
    """Four 64x64 scenes, enough for 16 patches of 32 pixels."""
    from sarfuse.synth import SynthConfig, generate_benchmark

    root = tmp_path_factory.mktemp("bench")
    return generate_benchmark(SynthConfig(height=64, width=64, smoothness=9, seed=3), 4, root)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
