import numpy as np
import pytest
import torch

from rdvc.quantizer import HARD_TAU, Codebook, dequantize, quantize_hard, soft_assign, straight_through
from rdvc import nncore

C3 = torch.tensor([-1.0, 0.0, 1.0])


def test_nearest_center_and_exact_hit():
    assert int(quantize_hard(torch.tensor(0.4), C3)) == 1
    assert quantize_hard(C3, C3).tolist() == [0, 1, 2]


def test_ties_go_to_lowest_index():
    assert int(quantize_hard(torch.tensor(0.5), C3)) == 1
    assert int(quantize_hard(torch.tensor(0.0), torch.tensor([1.0, -1.0, 0.0, 0.0]))) == 2


def test_hard_matches_sharp_soft_argmax():
    gen = torch.Generator().manual_seed(0)
    z = 3 * torch.randn(100_000, generator=gen)
    c = Codebook(8).centers.detach()
    assert torch.equal(soft_assign(z, c, HARD_TAU).argmax(-1), quantize_hard(z, c))


def test_soft_assign_values():
    p = soft_assign(torch.tensor(0.4, dtype=torch.float64), C3.double(), 1.0)
    e = np.exp([-1.4, -0.4, -0.6])
    assert np.allclose(p.numpy(), e / e.sum(), atol=1e-12)
    # frozen from the direct evaluation above
    assert np.allclose(p.numpy(), [0.1682, 0.4573, 0.3744], atol=5e-5)
    assert torch.allclose(soft_assign(torch.tensor(0.0), torch.tensor([-1.0, 1.0]), 1.0), torch.tensor([0.5, 0.5]))
    assert torch.allclose(soft_assign(torch.tensor(0.3), C3, 1e-9), torch.full((3,), 1 / 3))
    with pytest.raises(ValueError):
        soft_assign(torch.tensor(0.0), C3, 0.0)


@pytest.mark.parametrize("tau", [1e-3, 1.0, 10.0, 1e7])
def test_soft_rows_normalized(tau):
    z = 4 * torch.randn(1000, generator=torch.Generator().manual_seed(1))
    s = soft_assign(z, Codebook(8).centers.detach(), tau).sum(-1)
    assert torch.allclose(s, torch.ones_like(s), atol=1e-6)
    assert torch.isfinite(s).all()


def test_straight_through_forward_is_hard():
    z = torch.tensor([0.4, -0.7, 2.0])
    z_hat, q = straight_through(z, C3)
    assert torch.equal(z_hat, torch.tensor([0.0, -1.0, 1.0]))
    assert torch.equal(q, torch.nn.functional.one_hot(quantize_hard(z, C3), 3).float())


def test_straight_through_backward_matches_soft_expectation():
    z = torch.randn(2, 5, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    c = torch.tensor([-1.5, -0.2, 0.4, 1.3], dtype=torch.float64)
    proj = torch.randn(2, 5, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    zz, cc = z.clone().requires_grad_(True), c.clone().requires_grad_(True)
    (straight_through(zz, cc)[0] * proj).sum().backward()

    def soft_expect():
        return ((soft_assign(z, c, 1.0) * c).sum(-1) * proj).sum()

    for x, g in ((z, zz.grad), (c, cc.grad)):
        n = nncore.numerical_grad(soft_expect, x)
        assert float((g - n).abs().max()) / float(n.abs().max()) <= 1e-4


def test_scaling_invariance():
    z = torch.randn(1000, generator=torch.Generator().manual_seed(3))
    c = Codebook(8).centers.detach()
    assert torch.equal(quantize_hard(7.5 * z, 7.5 * c), quantize_hard(z, c))


def test_dequantize_roundtrip():
    c = torch.tensor([0.3, -2.0, 1.1, 0.0, 5.0])
    codes = torch.randint(0, 5, (3, 4), generator=torch.Generator().manual_seed(0))
    assert torch.equal(quantize_hard(dequantize(codes, c), c), codes)


def test_codebook_needs_two_centers():
    with pytest.raises(ValueError):
        Codebook(1)
    assert torch.allclose(Codebook(5).centers, torch.linspace(-2, 2, 5))
