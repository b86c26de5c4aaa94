"""Procedural video clips for desk-scale experiments and tests.

All generators return ``T x 3 x H x W`` float32 tensors with integral values
in 0..255 and are fully determined by their seed.
"""
from __future__ import annotations

import numpy as np
import torch


def texture(h, w, rng, scale=6.0, channels=3):
    """Periodic band-limited noise, ``channels x h x w`` in 0..255."""
    fy = np.fft.fftfreq(h)[:, None] * h
    fx = np.fft.fftfreq(w)[None, :] * w
    radius = np.sqrt((fy / h) ** 2 + (fx / w) ** 2) * max(h, w)
    filt = 1.0 / (1.0 + (radius / scale) ** 2)
    out = []
    base = rng.standard_normal((h, w))
    for _ in range(channels):
        noise = 0.6 * base + 0.4 * rng.standard_normal((h, w))
        img = np.real(np.fft.ifft2(np.fft.fft2(noise) * filt))
        img = (img - img.mean()) / (img.std() + 1e-12)
        out.append(np.clip(128 + 50 * img, 0, 255))
    return np.stack(out)


def smooth_background(h, w, rng):
    """Slowly varying colour gradient."""
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    out = []
    for _ in range(3):
        a, b, c = rng.uniform(40, 200), rng.uniform(-60, 60), rng.uniform(-60, 60)
        out.append(np.clip(a + b * yy + c * xx, 0, 255))
    return np.stack(out)


def _clip(frames):
    return torch.from_numpy(np.round(np.stack(frames)).astype(np.float32))


DIRECTIONS = {"right": (0, 1), "left": (0, -1), "down": (1, 0), "up": (-1, 0)}


def translating_texture(T=8, H=64, W=64, speed=8, seed=0, scale=6.0, direction=None):
    """A periodic texture sliding ``speed`` pixels per frame.

    ``direction`` is one of right/left/down/up, or random per seed when None.
    """
    rng = np.random.default_rng(seed)
    tex = texture(H, W, rng, scale)
    pick = rng.integers(4)
    dy, dx = DIRECTIONS[direction] if direction else list(DIRECTIONS.values())[pick]
    return _clip([np.roll(tex, (dy * speed * t, dx * speed * t), axis=(1, 2)) for t in range(T)])


def fg_bg_clip(T=8, H=64, W=64, seed=0, size=None, speed=4, scale=10.0):
    """Textured square moving over a smooth background.

    Returns ``(frames, mask)`` with the mask ``T x 1 x H x W`` in {0, 1}.
    """
    rng = np.random.default_rng(seed)
    size = size or H // 2
    bg = smooth_background(H, W, rng)
    fg = texture(size, size, rng, scale)
    y0, x0 = rng.integers(0, H - size + 1), rng.integers(0, W - size + 1)
    vy, vx = rng.choice([-speed, speed], size=2)
    frames, masks = [], []
    for _ in range(T):
        img = bg.copy()
        img[:, y0: y0 + size, x0: x0 + size] = fg
        m = np.zeros((1, H, W), np.float32)
        m[:, y0: y0 + size, x0: x0 + size] = 1
        frames.append(img)
        masks.append(m)
        # bounce off the borders
        if not 0 <= y0 + vy <= H - size:
            vy = -vy
        if not 0 <= x0 + vx <= W - size:
            vx = -vx
        y0, x0 = y0 + vy, x0 + vx
    return _clip(frames), torch.from_numpy(np.stack(masks))


def generic_clip(T=8, H=64, W=64, seed=0):
    """Mixed content: background texture with random drift plus moving blobs."""
    rng = np.random.default_rng(seed)
    tex = texture(H, W, rng, scale=rng.uniform(3, 12))
    vy, vx = rng.integers(-3, 4, size=2)
    n = int(rng.integers(1, 4))
    blobs = [
        (rng.uniform(0, H), rng.uniform(0, W), rng.uniform(4, H / 4), rng.uniform(-3, 3, 2), rng.uniform(0, 255, 3))
        for _ in range(n)
    ]
    yy, xx = np.mgrid[0:H, 0:W]
    frames = []
    for t in range(T):
        img = np.roll(tex, (vy * t, vx * t), axis=(1, 2)).copy()
        for cy, cx, r, v, col in blobs:
            py, px = cy + v[0] * t, cx + v[1] * t
            a = np.exp(-(((yy - py) ** 2 + (xx - px) ** 2) / (2 * r * r)))
            img = img * (1 - a) + col[:, None, None] * a
        frames.append(np.clip(img, 0, 255))
    return _clip(frames)


def dataset(kind, n, T=8, H=64, W=64, seed=0, **kw):
    """``n x T x 3 x H x W`` stack of clips; ``kind`` is texture, fgbg or generic.

    For ``fgbg`` the masks are returned as well.
    """
    if kind == "texture":
        return torch.stack([translating_texture(T, H, W, seed=seed + i, **kw) for i in range(n)])
    if kind == "generic":
        return torch.stack([generic_clip(T, H, W, seed=seed + i, **kw) for i in range(n)])
    if kind == "fgbg":
        pairs = [fg_bg_clip(T, H, W, seed=seed + i, **kw) for i in range(n)]
        return torch.stack([p[0] for p in pairs]), torch.stack([p[1] for p in pairs])
    raise ValueError(f"unknown synthetic kind {kind!r}")
