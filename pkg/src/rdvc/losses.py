"""Distortion and rate terms of the rate-distortion objective.

Frames are unscaled 0..255 values.  Distortion is ``1 - MS-SSIM`` computed
per plane (one channel of one frame) and averaged; rate is the cross-entropy
of the realized codes under the prior.  The combined objective is
``distortion + beta * rate_nats / pixels``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

POWER_FACTORS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
C1 = (0.01 * 255) ** 2
C2 = (0.03 * 255) ** 2
LN2 = math.log(2.0)
# floor before the fractional powers so a collapsed scale gives a finite gradient
_POW_FLOOR = 1e-8


@dataclass
class LossBreakdown:
    distortion: torch.Tensor
    rate: torch.Tensor
    rate_bpp: torch.Tensor
    total: torch.Tensor
    fg_ms_ssim: Optional[torch.Tensor] = None
    bg_ms_ssim: Optional[torch.Tensor] = None

    def as_floats(self):
        return {k: float(torch.as_tensor(v).detach()) for k, v in vars(self).items() if v is not None}


def _gaussian(size, sigma, dtype, device):
    ax = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(ax ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _window_size(h, w, window):
    size = min(window, h, w)
    return size if size % 2 else size - 1


def _blur(v, g):
    n = g.numel()
    v = F.conv2d(v, g.view(1, 1, n, 1))
    return F.conv2d(v, g.view(1, 1, 1, n))


def _ssim_maps(x, y, size, sigma):
    """Valid-window ``(ssim_map, cs_map)`` for ``N x 1 x H x W`` planes."""
    g = _gaussian(size, sigma, x.dtype, x.device)
    mu_x, mu_y = _blur(x, g), _blur(y, g)
    sxx = _blur(x * x, g) - mu_x * mu_x
    syy = _blur(y * y, g) - mu_y * mu_y
    sxy = _blur(x * y, g) - mu_x * mu_y
    cs = (2 * sxy + C2) / (sxx + syy + C2)
    lum = (2 * mu_x * mu_y + C1) / (mu_x * mu_x + mu_y * mu_y + C1)
    return lum * cs, cs


def _powers(scales, powers):
    powers = tuple(POWER_FACTORS if powers is None else powers)
    if scales > len(powers):
        raise ValueError(f"{scales} scales requested but only {len(powers)} power factors given")
    if scales == len(powers):
        return powers
    # fewer scales: keep the leading factors, rescaled to the same total
    head = powers[:scales]
    return tuple(p * sum(powers) / sum(head) for p in head)


def _planes(x):
    if x.dim() < 2:
        raise ValueError(f"expected at least 2 dims (H x W), got shape {tuple(x.shape)}")
    return x.reshape(-1, 1, *x.shape[-2:])


def _check_pyramid(h, w, scales):
    hh, ww = h, w
    for _ in range(scales - 1):
        hh, ww = hh // 2, ww // 2
    if min(hh, ww) < 3:
        raise ValueError(
            f"{h}x{w} input is too small for {scales} MS-SSIM scales (coarsest {hh}x{ww} < 3); "
            "reduce the number of scales or use larger frames"
        )


def _pyramid(x, y, scales, window, sigma, powers, mask=None):
    x, y = _planes(x), _planes(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    _check_pyramid(x.shape[-2], x.shape[-1], scales)
    weights = _powers(scales, powers)
    for j, p in enumerate(weights):
        size = _window_size(x.shape[-2], x.shape[-1], window)
        ssim_map, cs_map = _ssim_maps(x, y, size, sigma)
        m = None
        if mask is not None:
            c = size // 2
            m = mask[..., c: mask.shape[-2] - c, c: mask.shape[-1] - c]
        yield (ssim_map if j == scales - 1 else cs_map), m, p
        if j < scales - 1:
            x, y = F.avg_pool2d(x, 2), F.avg_pool2d(y, 2)
            if mask is not None:
                mask = F.avg_pool2d(mask, 2)


def ms_ssim(x, x_hat, scales=5, window=11, sigma=1.5, powers=None, reduce=True):
    """MS-SSIM of ``... x H x W`` tensors, averaged over every leading plane."""
    value = None
    for v, _, p in _pyramid(x, x_hat, scales, window, sigma, powers):
        term = v.mean(dim=(1, 2, 3)).clamp_min(_POW_FLOOR) ** p
        value = term if value is None else value * term
    return value.mean() if reduce else value


def _masked_mean(v, m):
    mass = m.sum(dim=(1, 2, 3))
    num = (v * m).sum(dim=(1, 2, 3))
    empty = mass <= 0
    # an empty region is neutral: score 1 with no gradient
    return torch.where(empty, torch.ones_like(num), num / torch.where(empty, torch.ones_like(mass), mass))


def semantic_ms_ssim(x, x_hat, mask, alpha=0.95, scales=5, window=11, sigma=1.5, powers=None):
    """``(fg_score, bg_score, weighted_distortion)`` with per-scale pooled masks.

    ``mask`` holds 1 for foreground and must broadcast against ``x``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    mask = _planes(torch.as_tensor(mask, dtype=x.dtype).expand_as(x))
    fg = bg = None
    for v, m, p in _pyramid(x, x_hat, scales, window, sigma, powers, mask):
        f = _masked_mean(v, m).clamp_min(_POW_FLOOR) ** p
        b = _masked_mean(v, 1 - m).clamp_min(_POW_FLOOR) ** p
        fg = f if fg is None else fg * f
        bg = b if bg is None else bg * b
    fg, bg = fg.mean(), bg.mean()
    return fg, bg, alpha * (1 - fg) + (1 - alpha) * (1 - bg)


def _position_nats(codes, log_pmfs):
    if codes.dtype.is_floating_point:
        # one-hot assignments with a soft gradient
        if codes.shape != log_pmfs.shape:
            raise ValueError(f"assignments {tuple(codes.shape)} not aligned with PMFs {tuple(log_pmfs.shape)}")
        return -(codes * log_pmfs).sum(-1)
    if codes.shape != log_pmfs.shape[:-1]:
        raise ValueError(f"codes {tuple(codes.shape)} not aligned with PMFs {tuple(log_pmfs.shape)}")
    return -log_pmfs.gather(-1, codes.long().unsqueeze(-1)).squeeze(-1)


def rate_loss(codes, log_pmfs):
    """Bits ``-sum log2 p(z_j | z_<j)``; ``log_pmfs`` are natural-log PMFs ``... x L``.

    ``codes`` may be integer indices or one-hot assignments ``... x L``.
    """
    return _position_nats(codes, log_pmfs).sum() / LN2


def rate_weights(mask, latent_hw, alpha=0.95, rho_fg=None, rho_bg=None):
    """Per-latent-position weights from a ``... x 1 x H x W`` foreground mask."""
    rho_fg = 1.0 - alpha if rho_fg is None else rho_fg
    rho_bg = alpha if rho_bg is None else rho_bg
    mask = torch.as_tensor(mask)
    lead = mask.shape[:-2]
    h, w = mask.shape[-2:]
    sh, sw = h // latent_hw[0], w // latent_hw[1]
    if sh * latent_hw[0] != h or sw * latent_hw[1] != w or sh != sw:
        raise ValueError(f"mask {h}x{w} cannot be pooled onto a {latent_hw[0]}x{latent_hw[1]} latent grid")
    m = F.avg_pool2d(mask.reshape(-1, 1, h, w).to(torch.float64), sh).reshape(*lead, *latent_hw)
    return rho_fg * m + rho_bg * (1 - m)


def semantic_rate(codes, log_pmfs, mask, alpha=0.95, rho_fg=None, rho_bg=None):
    """Weighted bits; ``mask`` is ``B x T x 1 x H x W`` against ``B x T x K x h x w`` codes."""
    nats = _position_nats(codes, log_pmfs)
    wts = rate_weights(mask, nats.shape[-2:], alpha, rho_fg, rho_bg).to(nats.dtype)
    return (nats * wts).sum() / LN2


def _pixels(x):
    return x.numel() // x.shape[-3]


def total_loss(x, x_hat, codes, log_pmfs, beta, **ms_kw):
    """``(1 - MS-SSIM) + beta * rate_nats / pixels`` for ``B x T x C x H x W`` chunks."""
    pixels = _pixels(x)
    distortion = 1 - ms_ssim(x, x_hat, **ms_kw)
    bits = rate_loss(codes, log_pmfs)
    return LossBreakdown(
        distortion=distortion,
        rate=bits,
        rate_bpp=bits / pixels,
        total=distortion + beta * bits * LN2 / pixels,
    )


def semantic_total_loss(x, x_hat, codes, log_pmfs, beta, mask, alpha=0.95, rho_fg=None, rho_bg=None, **ms_kw):
    pixels = _pixels(x)
    fg, bg, distortion = semantic_ms_ssim(x, x_hat, mask, alpha, **ms_kw)
    bits = rate_loss(codes, log_pmfs)
    weighted_bits = semantic_rate(codes, log_pmfs, mask, alpha, rho_fg, rho_bg)
    return LossBreakdown(
        distortion=distortion,
        rate=bits,
        rate_bpp=bits / pixels,
        total=distortion + beta * weighted_bits * LN2 / pixels,
        fg_ms_ssim=fg,
        bg_ms_ssim=bg,
    )
