import pytest
import torch

from rdvc.autoencoder import FRAME2D, VIDEO3D, Autoencoder, AutoencoderConfig
from rdvc.losses import ms_ssim
from rdvc import nncore


def small(mode, **kw):
    torch.manual_seed(0)
    kw = {"latent_channels": 4, "hidden_channels": 8, "first_channels": 8, "residual_blocks": 1, **kw}
    return Autoencoder(AutoencoderConfig(mode=mode, **kw)).eval()


@pytest.mark.parametrize("mode", [FRAME2D, VIDEO3D])
def test_full_size_shapes(mode):
    ae = Autoencoder(AutoencoderConfig(mode=mode, hidden_channels=16, first_channels=8, residual_blocks=1)).eval()
    with torch.no_grad():
        z = ae.encode_continuous(torch.zeros(1, 8, 3, 160, 160))
        assert z.shape == (1, 8, 32, 20, 20)
        assert ae.decode(z).shape == (1, 8, 3, 160, 160)


@pytest.mark.parametrize("T,H,W", [(8, 64, 64), (1, 8, 16), (3, 24, 40)])
def test_shape_contract(T, H, W):
    x = 255 * torch.rand(2, T, 3, H, W)
    outs = []
    for mode in (FRAME2D, VIDEO3D):
        ae = small(mode)
        with torch.no_grad():
            z = ae.encode_continuous(x)
            assert z.shape == (2, T, 4, H // 8, W // 8)
            assert ae.decode(z).shape == x.shape
        outs.append(z)
    assert not torch.equal(outs[0], outs[1])


def test_bad_inputs():
    ae = small(VIDEO3D)
    with pytest.raises(ValueError, match="divisible"):
        ae.encode_continuous(torch.zeros(1, 2, 3, 12, 16))
    with pytest.raises(ValueError, match="channels"):
        ae.encode_continuous(torch.zeros(1, 2, 4, 16, 16))
    with pytest.raises(ValueError):
        AutoencoderConfig(mode="4d")


def test_parameter_count_independent_of_size():
    ae = small(VIDEO3D)
    n = sum(p.numel() for p in ae.parameters())
    with torch.no_grad():
        ae.encode_continuous(torch.zeros(1, 4, 3, 32, 32))
    assert n == sum(p.numel() for p in ae.parameters())


def test_multimodal_channels():
    ae = small(FRAME2D, input_channels=12)
    with torch.no_grad():
        assert ae.decode(ae.encode_continuous(torch.zeros(1, 2, 12, 16, 16))).shape == (1, 2, 12, 16, 16)


def test_translation_equivariance_interior():
    ae = small(FRAME2D).double()
    x = 255 * torch.rand(1, 1, 3, 64, 96, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    xs = torch.roll(x, 8, dims=-1)
    with torch.no_grad():
        z, zs = ae.encode_continuous(x), ae.encode_continuous(xs)
    # shift of 8 pixels is one latent column; compare away from the borders
    m = 3
    assert torch.allclose(zs[..., m + 1: -m], z[..., m: -m - 1], atol=1e-4)


def test_msssim_gradient_wrt_latents():
    ae = small(FRAME2D, latent_channels=2, hidden_channels=4, first_channels=4).double()
    x = 255 * torch.rand(1, 1, 1, 32, 32, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    ae = Autoencoder(AutoencoderConfig(mode=FRAME2D, input_channels=1, latent_channels=2, hidden_channels=4,
                                       first_channels=4, residual_blocks=1)).double().eval()
    z = torch.randn(1, 1, 2, 4, 4, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    err = nncore.gradcheck(lambda z: ms_ssim(x, 127.5 + 30 * ae.decode(z), scales=2), [z])
    assert err <= 1e-4
