import numpy as np
import pytest
import torch

from rotadapt.core import Pool
from rotadapt.models import ModelSpec, build_model


def tiny_model(num_classes=3, size=4, width=6, seed=0, dtype=torch.float64):
    """Dense tanh model: 3*4*4*6 + 6 + 6*3 + 3 + 6*4 + 4 = 343 parameters."""
    spec = ModelSpec(arch="tiny", num_classes=num_classes, image_size=size, width=width)
    return build_model(spec, seed=seed).to(dtype)


def random_pool(n, size=4, channels=3, num_classes=3, seed=0, labeled=True, domain="target"):
    rng = np.random.default_rng(seed)
    images = rng.random((n, size, size, channels), dtype=np.float32)
    labels = rng.integers(0, num_classes, n) if labeled else None
    return Pool(images, labels, [f"{domain}/x{i:04d}.png" for i in range(n)], domain)


@pytest.fixture
def tiny():
    return tiny_model()


# pass/fail lines from test_acceptance.py, echoed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("#")[1].split()[0])):
            terminalreporter.write_line(line)
