import numpy as np
import pytest

from trustcnn.nn.layers import LayerKind, build_model, conv, dense, simple


def micro_model(seed=0, classes=2, channels=2, size=4, train="conv"):
    """conv(3x3) -> relu -> gap -> dense -> softmax; only `train` is unfrozen."""
    specs = [
        conv("conv", channels, 3, padding=1, frozen=train != "conv"),
        simple(LayerKind.RELU, "relu"),
        simple(LayerKind.GLOBAL_AVG_POOL, "gap"),
        dense("dense", classes, frozen=train != "dense"),
        simple(LayerKind.SOFTMAX, "softmax"),
    ]
    return build_model(specs, (1, size, size), "conv", seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.LINES):
            terminalreporter.write_line(line)
