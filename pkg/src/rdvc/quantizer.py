"""Scalar codebook quantization with a softmax straight-through gradient."""
from __future__ import annotations

import torch
import torch.nn as nn

HARD_TAU = 1e7
SOFT_TAU = 1.0


class Codebook(nn.Module):
    """``L`` learned scalar centers, initialized evenly on ``[-2, 2]``."""

    def __init__(self, num_centers=8, low=-2.0, high=2.0):
        super().__init__()
        if num_centers < 2:
            raise ValueError(f"codebook needs at least 2 centers, got {num_centers}")
        self.centers = nn.Parameter(torch.linspace(low, high, num_centers))

    def __len__(self):
        return self.centers.numel()

    def forward(self, z_tilde):
        return straight_through(z_tilde, self.centers)


def _centers(cb):
    return cb.centers if isinstance(cb, Codebook) else torch.as_tensor(cb)


def quantize_hard(z_tilde, cb):
    """Index of the nearest center per element; ties go to the lowest index."""
    c = _centers(cb).to(z_tilde.dtype)
    dist = (z_tilde.detach().unsqueeze(-1) - c.detach()).abs()
    # argmin returns the first minimal index
    return dist.argmin(dim=-1)


def soft_assign(z_tilde, cb, tau):
    """``softmax(-tau * |z - c_i|)`` over the trailing codebook axis."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    c = _centers(cb).to(z_tilde.dtype)
    logits = -tau * (z_tilde.unsqueeze(-1) - c).abs()
    return torch.softmax(logits, dim=-1)


def dequantize(codes, cb):
    return _centers(cb)[codes]


def straight_through(z_tilde, cb, tau=SOFT_TAU):
    """Dequantized values with the gradient of the soft expectation.

    Returns ``(z_hat, q)``: ``z_hat`` equals ``c[quantize_hard(z)]`` exactly in
    the forward pass, and ``q`` is the one-hot assignment tensor (``... x L``)
    carrying the ``soft_assign(tau)`` gradient.
    """
    c = _centers(cb).to(z_tilde.dtype)
    idx = quantize_hard(z_tilde, c)
    soft = soft_assign(z_tilde, c, tau)
    hard = torch.nn.functional.one_hot(idx, c.numel()).to(z_tilde.dtype)
    # x - x.detach() is exactly zero, so forward values are the hard ones
    q = hard + (soft - soft.detach())
    expect = (soft * c).sum(-1)
    z_hat = c.detach()[idx] + (expect - expect.detach())
    return z_hat, q
