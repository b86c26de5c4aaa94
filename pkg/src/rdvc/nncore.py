"""Layer set and optimizer used by the codec networks.

Everything here is a thin, shape-checked layer over ``torch.nn.functional``;
torch provides the reverse-mode differentiation.  Padding conventions are
chosen so that :func:`conv` and :func:`transposed_conv` are exact adjoints.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

_AXES = {2: ("height", "width"), 3: ("time", "height", "width")}


def _tuple(v, dims) -> Tuple[int, ...]:
    if isinstance(v, int):
        return (v,) * dims
    v = tuple(int(i) for i in v)
    if len(v) != dims:
        raise ValueError(f"expected {dims} values, got {v}")
    return v


def _check_conv_args(input, weight, stride, dims, in_axis=1):
    if dims not in _AXES:
        raise ValueError(f"dims must be 2 or 3, got {dims}")
    if input.dim() != dims + 2:
        raise ValueError(
            f"{dims}D convolution expects a {dims + 2}-axis input, got shape {tuple(input.shape)}"
        )
    if weight.dim() != dims + 2:
        raise ValueError(f"weight must have {dims + 2} axes, got shape {tuple(weight.shape)}")
    if input.shape[1] != weight.shape[in_axis]:
        raise ValueError(
            f"channel axis mismatch: input has {input.shape[1]} channels, "
            f"weight expects {weight.shape[in_axis]}"
        )
    stride = _tuple(stride, dims)
    for name, s in zip(_AXES[dims], stride):
        if s < 1:
            raise ValueError(f"stride along {name} axis must be >= 1, got {s}")
    for name, k in zip(_AXES[dims], weight.shape[2:]):
        if k % 2 == 0:
            raise ValueError(f"kernel extent along {name} axis must be odd, got {k}")
    return stride


def conv(input, weight, bias=None, stride=1, dims=2):
    """Same-padded convolution; output extent is ``ceil(n / stride)`` per axis."""
    stride = _check_conv_args(input, weight, stride, dims)
    padding = tuple((k - 1) // 2 for k in weight.shape[2:])
    fn = F.conv2d if dims == 2 else F.conv3d
    return fn(input, weight, bias, stride=stride, padding=padding)


def transposed_conv(input, weight, bias=None, stride=1, dims=2):
    """Adjoint of :func:`conv`; output extent is ``n * stride`` per axis.

    ``weight`` has layout ``(C_in, C_out, *kernel)`` so that the same tensor
    used as a :func:`conv` kernel yields the adjoint operator.
    """
    stride = _check_conv_args(input, weight, stride, dims, in_axis=0)
    padding = tuple((k - 1) // 2 for k in weight.shape[2:])
    output_padding = tuple(s - 1 for s in stride)
    fn = F.conv_transpose2d if dims == 2 else F.conv_transpose3d
    return fn(input, weight, bias, stride=stride, padding=padding, output_padding=output_padding)


def batchnorm(input, scale, shift, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel normalization over every non-channel axis.

    In training mode the running statistics are updated in place.
    """
    c = input.shape[1]
    for name, t in (("scale", scale), ("shift", shift)):
        if t.shape != (c,):
            raise ValueError(f"{name} has shape {tuple(t.shape)}, expected ({c},)")
    return F.batch_norm(input, running_mean, running_var, scale, shift, training, momentum, eps)


def conv_mask(out_channels, in_channels, kernel_size, mask_type="A", channel_groups=1):
    """Autoregressive kernel mask in raster order with channel groups.

    A position's predecessors are every position above it, every position to
    its left on the same row and, at the same position, every lower channel
    group.  Type ``B`` additionally admits the same group.
    """
    if mask_type not in ("A", "B"):
        raise ValueError(f"mask_type must be 'A' or 'B', got {mask_type!r}")
    if channel_groups < 1 or out_channels % channel_groups or in_channels % channel_groups:
        raise ValueError(
            f"channel counts ({out_channels} out, {in_channels} in) are not divisible "
            f"into {channel_groups} groups"
        )
    kh, kw = _tuple(kernel_size, 2)
    mask = torch.zeros(out_channels, in_channels, kh, kw)
    ch, cw = kh // 2, kw // 2
    mask[:, :, :ch, :] = 1
    mask[:, :, ch, :cw] = 1
    og = torch.arange(out_channels) // (out_channels // channel_groups)
    ig = torch.arange(in_channels) // (in_channels // channel_groups)
    if mask_type == "A":
        center = ig[None, :] < og[:, None]
    else:
        center = ig[None, :] <= og[:, None]
    mask[:, :, ch, cw] = center.to(mask.dtype)
    return mask


def masked_conv(input, weight, bias=None, mask_type="A", channel_groups=1):
    """Causally masked 2D same-padded convolution (see :func:`conv_mask`)."""
    if input.dim() != 4:
        raise ValueError(f"masked_conv expects a 4-axis input, got shape {tuple(input.shape)}")
    cout, cin, kh, kw = weight.shape
    if input.shape[1] != cin:
        raise ValueError(f"channel axis mismatch: input has {input.shape[1]}, weight expects {cin}")
    if input.shape[1] % channel_groups:
        raise ValueError(f"{input.shape[1]} channels not divisible into {channel_groups} groups")
    mask = conv_mask(cout, cin, (kh, kw), mask_type, channel_groups).to(weight)
    return conv(input, weight * mask, bias, 1, 2)


def gated_activation(features, groups=1):
    """``tanh(a) * sigmoid(b)`` where ``a``/``b`` are the two halves of each group.

    With ``groups == 1`` the channel axis is simply split in half.
    """
    c = features.shape[1]
    if c % (2 * groups):
        raise ValueError(f"gated activation needs an even channel count per group, got {c} channels")
    shape = features.shape
    f = features.reshape(shape[0], groups, 2, c // (2 * groups), *shape[2:])
    out = torch.tanh(f[:, :, 0]) * torch.sigmoid(f[:, :, 1])
    return out.reshape(shape[0], c // 2, *shape[2:])


def conv_gru_step(input, hidden, gate_weight, gate_bias, cand_weight, cand_bias):
    """One convolutional GRU update.

    ``gate_weight`` maps ``[input, hidden]`` to update and reset gates (in that
    order); ``cand_weight`` maps ``[input, reset * hidden]`` to the candidate.
    """
    if input.shape[0] != hidden.shape[0] or input.shape[2:] != hidden.shape[2:]:
        raise ValueError(
            f"spatial mismatch between input {tuple(input.shape)} and hidden {tuple(hidden.shape)}"
        )
    gates = torch.sigmoid(conv(torch.cat([input, hidden], 1), gate_weight, gate_bias))
    update, reset = gates.chunk(2, dim=1)
    cand = torch.tanh(conv(torch.cat([input, reset * hidden], 1), cand_weight, cand_bias))
    return (1 - update) * hidden + update * cand


def he_uniform_(weight: torch.Tensor, fan_in: int) -> torch.Tensor:
    bound = math.sqrt(6.0 / fan_in)
    with torch.no_grad():
        return weight.uniform_(-bound, bound)


class Conv(nn.Module):
    def __init__(self, cin, cout, kernel_size, stride=1, dims=2, bias=True):
        super().__init__()
        self.dims = dims
        self.stride = _tuple(stride, dims)
        k = _tuple(kernel_size, dims)
        self.weight = nn.Parameter(torch.empty(cout, cin, *k))
        he_uniform_(self.weight, cin * int(np.prod(k)))
        self.bias = nn.Parameter(torch.zeros(cout)) if bias else None

    def forward(self, x):
        return conv(x, self.weight, self.bias, self.stride, self.dims)


class TransposedConv(nn.Module):
    def __init__(self, cin, cout, kernel_size, stride=1, dims=2, bias=True):
        super().__init__()
        self.dims = dims
        self.stride = _tuple(stride, dims)
        k = _tuple(kernel_size, dims)
        self.weight = nn.Parameter(torch.empty(cin, cout, *k))
        he_uniform_(self.weight, cin * int(np.prod(k)))
        self.bias = nn.Parameter(torch.zeros(cout)) if bias else None

    def forward(self, x):
        return transposed_conv(x, self.weight, self.bias, self.stride, self.dims)


class BatchNorm(nn.Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))
        # set by the trainer to stop statistics updates late in training
        self.frozen = False

    def forward(self, x):
        training = self.training and not self.frozen
        return batchnorm(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            training, self.momentum, self.eps,
        )


class MaskedConv2d(nn.Module):
    def __init__(self, cin, cout, kernel_size, mask_type, channel_groups, bias=True):
        super().__init__()
        kh, kw = _tuple(kernel_size, 2)
        self.mask_type = mask_type
        self.channel_groups = channel_groups
        self.weight = nn.Parameter(torch.empty(cout, cin, kh, kw))
        mask = conv_mask(cout, cin, (kh, kw), mask_type, channel_groups)
        # fan-in counts only the taps the mask keeps
        he_uniform_(self.weight, max(1, int(mask.sum(dim=(1, 2, 3)).max())))
        self.register_buffer("mask", mask, persistent=False)
        self.bias = nn.Parameter(torch.zeros(cout)) if bias else None

    def masked_weight(self):
        return self.weight * self.mask

    def forward(self, x):
        return masked_conv(x, self.weight, self.bias, self.mask_type, self.channel_groups)


class ConvGRUCell(nn.Module):
    def __init__(self, input_channels, hidden_channels, kernel_size=3):
        super().__init__()
        self.hidden_channels = hidden_channels
        cin = input_channels + hidden_channels
        k = kernel_size
        self.gate_weight = nn.Parameter(torch.empty(2 * hidden_channels, cin, k, k))
        self.gate_bias = nn.Parameter(torch.zeros(2 * hidden_channels))
        self.cand_weight = nn.Parameter(torch.empty(hidden_channels, cin, k, k))
        self.cand_bias = nn.Parameter(torch.zeros(hidden_channels))
        he_uniform_(self.gate_weight, cin * k * k)
        he_uniform_(self.cand_weight, cin * k * k)

    def forward(self, x, h):
        return conv_gru_step(x, h, self.gate_weight, self.gate_bias, self.cand_weight, self.cand_bias)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    exp_avg: Dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: Dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adam_step(params: Iterable[Tuple[str, torch.Tensor]], state: AdamState) -> AdamState:
    """Bias-corrected Adam update applied in place to ``(name, tensor)`` pairs.

    Every parameter must carry a gradient; a missing one is an error rather
    than a silent skip.
    """
    params = list(params)
    for name, p in params:
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
    state.step += 1
    bc1 = 1 - state.beta1 ** state.step
    bc2 = 1 - state.beta2 ** state.step
    for name, p in params:
        g = p.grad
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = torch.zeros_like(p)
            state.exp_avg_sq[name] = torch.zeros_like(p)
        v = state.exp_avg_sq[name]
        m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / bc1)
    return state


def numerical_grad(fn: Callable[[], torch.Tensor], x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central finite-difference gradient of scalar ``fn()`` w.r.t. ``x`` (perturbed in place)."""
    grad = torch.zeros_like(x)
    flat = x.data.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(fn())
            flat[i] = orig - h
            fm = float(fn())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def gradcheck(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], h: float = 1e-5) -> float:
    """Max relative error between autograd and central differences.

    ``fn(*inputs)`` may return any tensor; it is reduced against a fixed
    random projection so every output element is exercised.  The error is
    normalized by the largest gradient magnitude.
    """
    inputs = [t.detach().to(torch.float64).requires_grad_(True) for t in inputs]
    gen = torch.Generator().manual_seed(1234)
    out = fn(*inputs)
    proj = torch.randn(out.shape, generator=gen, dtype=torch.float64)

    def scalar():
        return (fn(*inputs) * proj).sum()

    analytic = torch.autograd.grad(scalar(), inputs, allow_unused=True)
    worst = 0.0
    for x, a in zip(inputs, analytic):
        a = torch.zeros_like(x) if a is None else a
        n = numerical_grad(scalar, x, h)
        scale = max(float(n.abs().max()), float(a.abs().max()), 1e-12)
        worst = max(worst, float((a - n).abs().max()) / scale)
    return worst
