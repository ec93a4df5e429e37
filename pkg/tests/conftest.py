import numpy as np
import pytest
import torch

from bimodal_gan.networks import NetConfig


@pytest.fixture
def tiny_net():
    return NetConfig(image_size=16, latent_dim=8, base_channels=4, enc_hidden=16, critic_channels=4, seed_size=2)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _threads():
    torch.set_num_threads(1)


_AC_LINES = []


@pytest.fixture
def ac_report():
    """Record one PASS/FAIL line per acceptance criterion (echoed in the summary)."""

    def record(name, ok, detail):
        line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
        _AC_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _AC_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _AC_LINES:
            terminalreporter.write_line(line)
