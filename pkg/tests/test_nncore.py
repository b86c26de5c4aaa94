import pytest
import torch

from rdvc import nncore
from conftest import f64


def test_conv_shape_stride2():
    x = torch.zeros(1, 3, 160, 160)
    w = torch.zeros(64, 3, 5, 5)
    assert nncore.conv(x, w, stride=2).shape == (1, 64, 80, 80)


@pytest.mark.parametrize("dims", [2, 3])
def test_identity_kernels(dims):
    x = f64(1, 3, *([5] * dims))
    w = torch.eye(3, dtype=torch.float64).reshape(3, 3, *([1] * dims))
    assert torch.equal(nncore.conv(x, w, dims=dims), x)
    assert torch.equal(nncore.transposed_conv(x, w, dims=dims), x)


def test_conv_channel_mismatch_names_axis():
    with pytest.raises(ValueError, match="channel"):
        nncore.conv(torch.zeros(1, 2, 4, 4), torch.zeros(3, 3, 3, 3))


def test_transposed_conv_shape():
    y = nncore.transposed_conv(torch.zeros(1, 64, 80, 80), torch.zeros(64, 3, 5, 5), stride=2)
    assert y.shape == (1, 3, 160, 160)


@pytest.mark.parametrize("dims,stride", [(2, 2), (2, 1), (3, (1, 2, 2))])
def test_conv_transpose_adjoint(dims, stride):
    x = f64(1, 3, *([4] * (dims - 2)), 8, 8, seed=1)
    w = f64(5, 3, *([3] * dims), seed=2)
    y = nncore.conv(x, w, stride=stride, dims=dims)
    v = f64(*y.shape, seed=3)
    lhs = (y * v).sum()
    rhs = (x * nncore.transposed_conv(v, w, stride=stride, dims=dims)).sum()
    assert abs(float(lhs - rhs)) <= 1e-5 * max(1.0, abs(float(lhs)))


def test_conv_gradcheck():
    assert nncore.gradcheck(lambda x, w, b: nncore.conv(x, w, b), [f64(1, 2, 6, 6), f64(3, 2, 3, 3, seed=1),
                                                                  f64(3, seed=2)]) <= 1e-4


def test_batchnorm_train_normalizes_and_tracks():
    x = 5 + 2 * torch.randn(16, 2, 8, 8, generator=torch.Generator().manual_seed(0))
    bn = nncore.BatchNorm(2)
    y = bn.train()(x)
    assert torch.allclose(y.mean(dim=(0, 2, 3)), torch.zeros(2), atol=1e-3)
    assert torch.allclose(y.var(dim=(0, 2, 3), unbiased=False), torch.ones(2), atol=1e-3)
    assert torch.allclose(bn.running_mean, 0.1 * x.mean(dim=(0, 2, 3)), atol=1e-5)


def test_batchnorm_eval_deterministic_and_initial_stats():
    bn = nncore.BatchNorm(3).eval()
    x = torch.randn(2, 3, 4, 4)
    a, b = bn(x), bn(x)
    assert torch.equal(a, b)
    assert torch.allclose(a, x / (1 + 1e-5) ** 0.5)


def test_batchnorm_frozen_uses_running_stats():
    bn = nncore.BatchNorm(2).train()
    bn.frozen = True
    x = 3 + torch.randn(4, 2, 3, 3)
    bn(x)
    assert torch.equal(bn.running_mean, torch.zeros(2))


def test_batchnorm_gradcheck():
    rm, rv = torch.zeros(2, dtype=torch.float64), torch.ones(2, dtype=torch.float64)
    err = nncore.gradcheck(lambda x, g, b: nncore.batchnorm(x, g, b, rm.clone(), rv.clone(), True),
                           [f64(1, 2, 4, 4), f64(2, seed=1), f64(2, seed=2)])
    assert err <= 1e-4


def test_masked_conv_first_position_has_no_context():
    x = f64(1, 2, 4, 4).requires_grad_(True)
    w = f64(2, 2, 3, 3, seed=1)
    y = nncore.masked_conv(x, w, None, "A", 1)
    (g,) = torch.autograd.grad(y[0, :, 0, 0].sum(), x)
    assert torch.equal(g, torch.zeros_like(g))


@pytest.mark.parametrize("mask_type", ["A", "B"])
def test_masked_conv_exhaustive_causality(mask_type):
    # 4 groups of one channel on a 4x4 grid; order is (h, w) raster, group innermost
    G, H, W = 4, 4, 4
    x = f64(1, G, H, W)
    w = f64(2 * G, G, 3, 3, seed=1)
    base = nncore.masked_conv(x, w, None, mask_type, G)
    order = [(r, c, g) for r in range(H) for c in range(W) for g in range(G)]
    for j, (r, c, g) in enumerate(order):
        xp = x.clone()
        xp[0, g, r, c] += 1.0
        out = nncore.masked_conv(xp, w, None, mask_type, G)
        for i, (ri, ci, gi) in enumerate(order):
            same = torch.equal(out[0, 2 * gi: 2 * gi + 2, ri, ci], base[0, 2 * gi: 2 * gi + 2, ri, ci])
            if j > i or (j == i and mask_type == "A"):
                assert same, (mask_type, (r, c, g), (ri, ci, gi))


def test_masked_conv_type_b_self_dependence():
    x = f64(1, 2, 3, 3)
    w = f64(2, 2, 3, 3, seed=1)
    xp = x.clone()
    xp[0, 1, 1, 1] += 1
    a = nncore.masked_conv(x, w, None, "B", 2)
    b = nncore.masked_conv(xp, w, None, "B", 2)
    assert not torch.equal(a[0, 1, 1, 1], b[0, 1, 1, 1])
    assert torch.equal(a[0, 0, 1, 1], b[0, 0, 1, 1])


def test_masked_conv_bad_groups():
    with pytest.raises(ValueError):
        nncore.conv_mask(4, 3, 3, "A", 2)
    with pytest.raises(ValueError):
        nncore.conv_mask(4, 4, 3, "C", 2)


def test_gated_activation():
    assert torch.equal(nncore.gated_activation(torch.zeros(1, 4, 2, 2)), torch.zeros(1, 2, 2, 2))
    a = f64(1, 2, 3, 3)
    out = nncore.gated_activation(torch.cat([a, torch.full_like(a, 1e4)], 1))
    assert torch.allclose(out, torch.tanh(a))
    with pytest.raises(ValueError):
        nncore.gated_activation(torch.zeros(1, 3, 2, 2))
    assert nncore.gradcheck(nncore.gated_activation, [f64(1, 8, 3, 3)]) <= 1e-4


def test_gated_activation_groups():
    x = f64(1, 8, 2, 2)
    out = nncore.gated_activation(x, groups=2)
    expect = torch.cat([torch.tanh(x[:, 0:2]) * torch.sigmoid(x[:, 2:4]),
                        torch.tanh(x[:, 4:6]) * torch.sigmoid(x[:, 6:8])], 1)
    assert torch.allclose(out, expect)


def _gru_weights(ci, ch, seed=0):
    return f64(2 * ch, ci + ch, 3, 3, seed=seed) * 0.3, f64(ch, ci + ch, 3, 3, seed=seed + 1) * 0.3


def test_gru_identity_limit():
    gw, cw = _gru_weights(2, 3)
    gb = torch.zeros(6, dtype=torch.float64)
    gb[:3] = -1e9
    h = torch.tanh(f64(1, 3, 4, 4, seed=5))
    out = nncore.conv_gru_step(f64(1, 2, 4, 4), h, gw, gb, cw, None)
    assert torch.equal(out, h)


def test_gru_zero():
    out = nncore.conv_gru_step(torch.zeros(1, 2, 3, 3), torch.zeros(1, 3, 3, 3), torch.zeros(6, 5, 3, 3), None,
                               torch.zeros(3, 5, 3, 3), None)
    assert torch.equal(out, torch.zeros(1, 3, 3, 3))


def test_gru_shape_mismatch():
    with pytest.raises(ValueError, match="spatial"):
        nncore.conv_gru_step(torch.zeros(1, 2, 3, 3), torch.zeros(1, 3, 4, 4), *[None] * 4)


def test_gru_two_step_gradcheck():
    def two(x1, x2, gw, cw):
        h = torch.zeros(1, 2, 3, 3, dtype=torch.float64)
        h = nncore.conv_gru_step(x1, h, gw, None, cw, None)
        return nncore.conv_gru_step(x2, h, gw, None, cw, None)

    gw, cw = _gru_weights(2, 2)
    assert nncore.gradcheck(two, [f64(1, 2, 3, 3), f64(1, 2, 3, 3, seed=1), gw, cw]) <= 1e-4


def test_adam_single_step_closed_form():
    p = torch.zeros(3, requires_grad=True)
    p.grad = torch.tensor([2.0, -0.5, 1e-3])
    st = nncore.AdamState(lr=0.01)
    nncore.adam_step([("p", p)], st)
    g = torch.tensor([2.0, -0.5, 1e-3])
    expect = -0.01 * g / (g.abs() + 1e-8)
    assert torch.allclose(p.detach(), expect, atol=1e-6)
    assert st.step == 1


def test_adam_zero_grad_and_missing_grad():
    p = torch.ones(2, requires_grad=True)
    p.grad = torch.zeros(2)
    nncore.adam_step([("p", p)], nncore.AdamState())
    assert torch.equal(p.detach(), torch.ones(2))
    q = torch.ones(2, requires_grad=True)
    with pytest.raises(ValueError, match="'q'"):
        nncore.adam_step([("q", q)], nncore.AdamState())


def test_adam_quadratic():
    w = torch.ones(1, requires_grad=True)
    st = nncore.AdamState(lr=0.1)
    for _ in range(100):
        w.grad = 2 * w.detach()
        nncore.adam_step([("w", w)], st)
    assert abs(float(w.detach())) < 0.5
    assert st.step == 100


def test_he_init_bounds():
    c = nncore.Conv(4, 8, 3)
    bound = (6 / 36) ** 0.5
    assert c.weight.abs().max() <= bound
    assert torch.equal(c.bias, torch.zeros(8))
