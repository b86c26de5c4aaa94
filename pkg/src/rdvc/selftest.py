"""Fast invariant suite behind ``rdvc self-test``.

Covers gradient checks of the differentiable ops, a coder round trip, prior
causality and a small end-to-end codec round trip.  Each check returns a
``(name, passed, detail)`` triple.
"""
from __future__ import annotations

import numpy as np
import torch

from . import nncore
from .autoencoder import AutoencoderConfig
from .codec import decode_latents, decode_video, encode_latents, encode_video, local_decode, to_chunks
from .codemodel import VARIANTS, ExactPrior, GatedPixelCNNPrior, PriorConfig
from .entropy import decode_symbols, encode_symbols
from .losses import ms_ssim, rate_loss
from .model import ModelConfig, RDVideoModel

GRAD_TOL = 1e-4


def _randn(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def gradient_checks():
    mask_a = nncore.conv_mask(4, 2, (3, 3), "A", 2)
    cases = {
        "conv2d": (lambda x, w: nncore.conv(x, w, stride=2), [_randn(1, 2, 5, 5), _randn(3, 2, 3, 3, seed=1)]),
        "conv3d": (lambda x, w: nncore.conv(x, w, dims=3), [_randn(1, 2, 3, 4, 4), _randn(2, 2, 3, 3, 3, seed=1)]),
        "transposed_conv": (lambda x, w: nncore.transposed_conv(x, w, stride=2),
                            [_randn(1, 2, 3, 3), _randn(2, 3, 3, 3, seed=1)]),
        "batchnorm": (lambda x, g, b: nncore.batchnorm(x, g, b, torch.zeros(3, dtype=torch.float64),
                                                       torch.ones(3, dtype=torch.float64), True),
                      [_randn(4, 3, 2, 2), _randn(3, seed=1), _randn(3, seed=2)]),
        "masked_conv": (lambda x, w: nncore.masked_conv(x, w * mask_a.double(), None, "A", 2),
                        [_randn(1, 2, 4, 4), _randn(4, 2, 3, 3, seed=1)]),
        "gated_activation": (lambda x: nncore.gated_activation(x, 2), [_randn(1, 8, 3, 3)]),
        "conv_gru": (lambda x, h, gw, cw: nncore.conv_gru_step(x, h, gw, None, cw, None),
                     [_randn(1, 2, 3, 3), _randn(1, 2, 3, 3, seed=1).tanh(), 0.3 * _randn(4, 4, 3, 3, seed=2),
                      0.3 * _randn(2, 4, 3, 3, seed=3)]),
        "ms_ssim": (lambda y: ms_ssim(128 + 40 * _randn(1, 1, 24, 24, seed=5), y, scales=2),
                    [128 + 40 * _randn(1, 1, 24, 24, seed=6)]),
        "rate_loss": (lambda lg: rate_loss(torch.tensor([[1, 0], [2, 1]]), torch.log_softmax(lg, -1)),
                      [_randn(2, 2, 3)]),
    }
    out = []
    for name, (fn, inputs) in cases.items():
        err = nncore.gradcheck(fn, inputs)
        out.append((f"grad:{name}", err <= GRAD_TOL, f"rel err {err:.2e}"))
    return out


def coder_roundtrip(n=20000, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for L in (2, 8, 256):
        p = rng.dirichlet(np.full(L, 0.5), size=n)
        s = np.minimum((p.cumsum(1) < rng.random((n, 1))).sum(1), L - 1)
        ok = np.array_equal(decode_symbols(encode_symbols(s, p), p), s)
        out.append((f"coder:L={L}", ok, f"{n} symbols"))
    return out


def _tiny_prior(variant, seed=0):
    torch.manual_seed(seed)
    prior = GatedPixelCNNPrior(PriorConfig(variant=variant, latent_channels=2, codebook_size=4,
                                           hidden_per_group=2, gru_channels=4))
    with torch.no_grad():
        for p in prior.parameters():
            p.add_(0.3 * torch.randn_like(p))
    return ExactPrior(prior)


def causality_checks(seed=0):
    """Perturb each symbol and verify no PMF before it (in coding order) moves."""
    rng = np.random.default_rng(seed)
    out = []
    for variant in VARIANTS:
        exact = _tiny_prior(variant, seed)
        T, K, H, W = 2, 2, 3, 3
        codes = rng.integers(0, 4, (1, T, K, H, W))
        base = exact.teacher_forced(codes)
        order = [(t, c, r, w) for t in range(T) for r in range(H) for w in range(W) for c in range(K)]
        bad = 0
        for j, pos in enumerate(order):
            pert = codes.copy()
            pert[(0,) + pos] = (pert[(0,) + pos] + 1) % 4
            new = exact.teacher_forced(pert)
            for (t, c, r, w) in order[: j + 1]:
                if not np.array_equal(new[0, t, c, r, w], base[0, t, c, r, w]):
                    bad += 1
        out.append((f"causality:{variant}", bad == 0, f"{bad} violations"))
    return out


def codec_roundtrip(seed=0):
    torch.manual_seed(seed)
    cfg = ModelConfig(
        AutoencoderConfig(latent_channels=4, hidden_channels=8, first_channels=8, residual_blocks=1),
        PriorConfig(latent_channels=4, hidden_per_group=2, variant="gru_conditioned", gru_channels=8),
    )
    model = RDVideoModel(cfg).eval()
    frames = torch.randint(0, 256, (10, 3, 16, 16), generator=torch.Generator().manual_seed(seed))
    data = encode_video(frames, model).to_bytes()
    codes_ok = np.array_equal(decode_latents(data, model), encode_latents(model, to_chunks(frames.float(), 8)).numpy())
    frames_ok = torch.equal(decode_video(data, model), local_decode(frames, model))
    return [("codec:latents", codes_ok, f"{len(data)} bytes"), ("codec:frames", frames_ok, "bitwise vs local")]


SUITES = (gradient_checks, coder_roundtrip, causality_checks, codec_roundtrip)


def run(report=print):
    results = []
    for suite in SUITES:
        for name, ok, detail in suite():
            report(f"{'PASS' if ok else 'FAIL'} {name} ({detail})")
            results.append((name, ok, detail))
    passed = sum(ok for _, ok, _ in results)
    return passed, len(results) - passed
