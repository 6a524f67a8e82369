import numpy as np
import pytest
import torch

from brainsegnet.config import DecoderConfig, EncoderConfig


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split()[2])):
            terminalreporter.write_line(line)


def pytest_configure(config):
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


@pytest.fixture
def small_encoder_cfg():
    return EncoderConfig(embed_dim=16, num_blocks=4, num_heads=2, patch_size=8,
                         adapter_bottleneck=4, lora_rank=2, input_size=(32, 32))


@pytest.fixture
def small_decoder_cfg():
    return DecoderConfig(in_channels=16, aspp_channels=16, num_classes=5, br_channels=8,
                         upsample_factor=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_check(fn, x, step=1e-3, rtol=1e-3, n_dirs=3, seed=0):
    """Central-difference derivative of ``sum(w * fn(x))`` along unit directions vs autograd.

    Returns the worst relative error over ``n_dirs`` random directions.
    """
    gen = torch.Generator().manual_seed(seed)
    x = x.detach().clone().requires_grad_(True)
    out = fn(x)
    w = torch.randn(out.shape, generator=gen, dtype=out.dtype)
    (grad,) = torch.autograd.grad((out * w).sum(), x)
    worst = 0.0
    with torch.no_grad():
        for _ in range(n_dirs):
            v = torch.randn(x.shape, generator=gen, dtype=x.dtype)
            v /= v.norm()
            fd = ((fn(x + step * v) * w).sum() - (fn(x - step * v) * w).sum()) / (2 * step)
            ad = (grad * v).sum()
            worst = max(worst, abs(float(fd - ad)) / max(abs(float(ad)), 1e-12))
    return worst
