import numpy as np
import pytest
import torch

from rdvc.autoencoder import AutoencoderConfig
from rdvc.codemodel import GatedPixelCNNPrior, PriorConfig
from rdvc.model import ModelConfig, RDVideoModel

torch.set_num_threads(1)


def f64(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def tiny_config(mode="video3D", variant="frame_conditioned", K=4, L=8):
    return ModelConfig(
        AutoencoderConfig(mode=mode, latent_channels=K, hidden_channels=8, first_channels=8, residual_blocks=1),
        PriorConfig(variant=variant, latent_channels=K, codebook_size=L, hidden_per_group=2, gru_channels=8),
    )


def tiny_model(seed=0, **kw):
    torch.manual_seed(seed)
    return RDVideoModel(tiny_config(**kw)).eval()


def random_prior(variant, K=2, L=4, seed=0, dtype=torch.float32, **kw):
    """A small prior with random (non-zero) weights everywhere, head included."""
    torch.manual_seed(seed)
    prior = GatedPixelCNNPrior(PriorConfig(variant=variant, latent_channels=K, codebook_size=L,
                                           hidden_per_group=2, gru_channels=4, **kw)).to(dtype)
    with torch.no_grad():
        for p in prior.parameters():
            p.add_(0.3 * torch.randn_like(p))
    return prior


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion, then assert it."""
    def record(n, ok, detail):
        ACCEPTANCE[n] = (bool(ok), detail)
        assert ok, f"criterion {n}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
