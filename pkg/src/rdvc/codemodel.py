"""Autoregressive code model: a gated PixelCNN over each latent frame.

A latent frame ``K x H x W`` is an image with ``K`` channel groups.  The
autoregressive order is raster order over positions with the channel group
as the innermost index, so symbol ``(c, r, w)`` is predicted from every
position above or to the left of ``(r, w)`` and from groups ``< c`` at
``(r, w)``.  Three temporal variants differ only in the per-frame context
injected before every gate: nothing, the previous latent frame, or the state
of a conv-GRU that has consumed all previous latent frames.

Two arithmetic paths exist.  The torch path (:meth:`GatedPixelCNNPrior.forward_teacher_forced`)
is differentiable and used for training and rate estimates.  The exact path
(:class:`ExactPrior`) reproduces it to float tolerance with fixed-order
kernels, and is the only path the codec uses.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import _exact
from .nncore import Conv, ConvGRUCell, MaskedConv2d, gated_activation, he_uniform_

UNCONDITIONAL = "unconditional"
FRAME_CONDITIONED = "frame_conditioned"
GRU_CONDITIONED = "gru_conditioned"
VARIANTS = (UNCONDITIONAL, FRAME_CONDITIONED, GRU_CONDITIONED)


@dataclass
class PriorConfig:
    variant: str = FRAME_CONDITIONED
    layers: int = 4
    kernel: int = 5
    hidden_per_group: int = 8
    latent_channels: int = 32
    codebook_size: int = 8
    gru_channels: int = 64
    cond_kernel: int = 3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.kernel % 2 == 0 or self.kernel < 3:
            raise ValueError(f"kernel must be odd and >= 3, got {self.kernel}")
        if self.hidden_per_group < 1 or self.layers < 1:
            raise ValueError("hidden_per_group and layers must be >= 1")

    @property
    def hidden(self):
        return self.hidden_per_group * self.latent_channels

    @property
    def receptive_radius(self):
        return self.layers * (self.kernel // 2)

    @property
    def context_channels(self):
        if self.variant == FRAME_CONDITIONED:
            return self.latent_channels
        if self.variant == GRU_CONDITIONED:
            return self.gru_channels
        return 0


def embed_codes(codes, embedding):
    """Replace every code index by its scalar embedding."""
    return embedding[codes]


class VerticalConv(nn.Module):
    """Convolution whose output row ``r`` sees rows ``r - k//2 .. r`` (or ``.. r - 1``)."""

    def __init__(self, cin, cout, kernel, strict):
        super().__init__()
        k2 = kernel // 2
        self.k2 = k2
        self.strict = strict
        rows = k2 if strict else k2 + 1
        self.weight = nn.Parameter(torch.empty(cout, cin, rows, kernel))
        he_uniform_(self.weight, cin * rows * kernel)
        self.bias = nn.Parameter(torch.zeros(cout))

    def forward(self, x):
        h = x.shape[2]
        x = F.pad(x, (self.k2, self.k2, self.k2, 0))
        return F.conv2d(x, self.weight, self.bias)[:, :, :h]


class ARMBlock(nn.Module):
    def __init__(self, cfg: PriorConfig, first: bool):
        super().__init__()
        K, D, k = cfg.latent_channels, cfg.hidden, cfg.kernel
        cin = K if first else D
        self.first = first
        self.groups = K
        self.vconv = VerticalConv(cin, 2 * D, k, strict=first)
        self.hconv = MaskedConv2d(cin, 2 * D, (1, k), "A" if first else "B", K)
        self.v2h = Conv(2 * D, 2 * D, 1)
        self.hres = MaskedConv2d(D, D, 1, "B", K)
        self.cond = Conv(cfg.context_channels, 4 * D, cfg.cond_kernel) if cfg.context_channels else None

    def condition_featuremap(self, context):
        """``(4h)K``-channel conditioning: the first half feeds the vertical gate."""
        return self.cond(context)

    def forward(self, v, h, context=None):
        vpre = self.vconv(v)
        cond = None
        if self.cond is not None and context is not None:
            if context.shape[2:] != v.shape[2:]:
                raise ValueError(
                    f"context spatial extent {tuple(context.shape[2:])} does not match latent grid "
                    f"{tuple(v.shape[2:])}"
                )
            cond = self.condition_featuremap(context)
            vpre = vpre + cond[:, : vpre.shape[1]]
        hpre = self.hconv(h) + self.v2h(vpre)
        if cond is not None:
            hpre = hpre + cond[:, vpre.shape[1]:]
        v_out = gated_activation(vpre, self.groups)
        res = self.hres(gated_activation(hpre, self.groups))
        h_out = res if self.first else h + res
        return v_out, h_out


class GatedPixelCNNPrior(nn.Module):
    def __init__(self, cfg: PriorConfig):
        super().__init__()
        self.cfg = cfg
        L, K = cfg.codebook_size, cfg.latent_channels
        self.embedding = nn.Parameter(torch.linspace(-2.0, 2.0, L))
        self.blocks = nn.ModuleList([ARMBlock(cfg, i == 0) for i in range(cfg.layers)])
        self.head = MaskedConv2d(cfg.hidden, K * L, 1, "B", K)
        # an untrained prior is uniform over the codebook
        with torch.no_grad():
            self.head.weight.zero_()
        self.gru = ConvGRUCell(K, cfg.gru_channels) if cfg.variant == GRU_CONDITIONED else None

    def embed(self, codes_or_q):
        """Integer codes, or one-hot assignments ``... x L`` (keeps their gradient)."""
        if codes_or_q.dtype in (torch.int64, torch.int32, torch.int16, torch.uint8):
            return embed_codes(codes_or_q.long(), self.embedding)
        return (codes_or_q * self.embedding).sum(-1)

    def gru_update(self, state, embedded_frame):
        if state.shape[0] != embedded_frame.shape[0] or state.shape[2:] != embedded_frame.shape[2:]:
            raise ValueError(
                f"GRU state {tuple(state.shape)} does not match frame {tuple(embedded_frame.shape)}"
            )
        return self.gru(embedded_frame, state)

    def contexts(self, emb):
        """Per-frame context ``B x T x Cc x H x W`` for embedded latents ``B x T x K x H x W``."""
        b, t, k, hh, ww = emb.shape
        if self.cfg.variant == UNCONDITIONAL:
            return None
        if self.cfg.variant == FRAME_CONDITIONED:
            return torch.cat([torch.zeros_like(emb[:, :1]), emb[:, :-1]], dim=1)
        state = emb.new_zeros(b, self.cfg.gru_channels, hh, ww)
        out = []
        for i in range(t):
            out.append(state)
            state = self.gru_update(state, emb[:, i])
        return torch.stack(out, 1)

    def frame_logits(self, x, context=None):
        """Logits ``F x K x H x W x L`` for embedded frames ``F x K x H x W``."""
        v = h = x
        for blk in self.blocks:
            v, h = blk(v, h, context)
        logits = self.head(h)
        f, _, hh, ww = logits.shape
        K, L = self.cfg.latent_channels, self.cfg.codebook_size
        return logits.reshape(f, K, L, hh, ww).permute(0, 1, 3, 4, 2)

    def forward_teacher_forced(self, codes_or_q):
        """Log-PMFs ``B x T x K x H x W x L`` for every position, all frames at once."""
        emb = self.embed(codes_or_q)
        if emb.dim() != 5 or emb.shape[2] != self.cfg.latent_channels:
            raise ValueError(
                f"expected B x T x {self.cfg.latent_channels} x H x W codes, got {tuple(emb.shape)}"
            )
        b, t = emb.shape[:2]
        ctx = self.contexts(emb)
        flat_ctx = None if ctx is None else ctx.reshape(b * t, *ctx.shape[2:])
        logits = self.frame_logits(emb.reshape(b * t, *emb.shape[2:]), flat_ctx)
        return torch.log_softmax(logits, dim=-1).reshape(b, t, *logits.shape[1:])

    def forward(self, codes_or_q):
        return self.forward_teacher_forced(codes_or_q)


def _np(t):
    return np.ascontiguousarray(t.detach().cpu().numpy().astype(np.float32))


class ExactPrior:
    """Fixed-order evaluation of a :class:`GatedPixelCNNPrior` snapshot.

    Every method here reproduces the same float32 values bit for bit,
    whatever the schedule: whole frames, cropped patches, or the cached
    symbol-by-symbol pass the codec runs.
    """

    def __init__(self, prior: GatedPixelCNNPrior):
        cfg = self.cfg = prior.cfg
        K, D, k, L, Ly = cfg.latent_channels, cfg.hidden, cfg.kernel, cfg.codebook_size, cfg.layers
        k2 = k // 2
        cmax = max(K, D)
        self.Wv = np.zeros((Ly, 2 * D, cmax, k2 + 1, k), np.float32)
        self.bv = np.zeros((Ly, 2 * D), np.float32)
        self.Wh = np.zeros((Ly, 2 * D, cmax, k2 + 1), np.float32)
        self.bh = np.zeros((Ly, 2 * D), np.float32)
        self.Wvh = np.zeros((Ly, 2 * D, 2 * D), np.float32)
        self.bvh = np.zeros((Ly, 2 * D), np.float32)
        self.Wr = np.zeros((Ly, D, D), np.float32)
        self.br = np.zeros((Ly, D), np.float32)
        self.cond = []
        for l, blk in enumerate(prior.blocks):
            wv = _np(blk.vconv.weight)
            self.Wv[l, :, : wv.shape[1], : wv.shape[2]] = wv
            self.bv[l] = _np(blk.vconv.bias)
            wh = _np(blk.hconv.masked_weight())
            self.Wh[l, :, : wh.shape[1]] = wh[:, :, 0, : k2 + 1]
            self.bh[l] = _np(blk.hconv.bias)
            self.Wvh[l] = _np(blk.v2h.weight)[:, :, 0, 0]
            self.bvh[l] = _np(blk.v2h.bias)
            self.Wr[l] = _np(blk.hres.masked_weight())[:, :, 0, 0]
            self.br[l] = _np(blk.hres.bias)
            if blk.cond is not None:
                self.cond.append((_np(blk.cond.weight), _np(blk.cond.bias)))
        self.Wo = _np(prior.head.masked_weight())[:, :, 0, 0].copy()
        self.bo = _np(prior.head.bias)
        self.embedding = _np(prior.embedding)
        if prior.gru is not None:
            g = prior.gru
            self.gru = tuple(_np(p) for p in (g.gate_weight, g.gate_bias, g.cand_weight, g.cand_bias))
        else:
            self.gru = None

    # -- contexts ---------------------------------------------------------
    def embed(self, codes):
        return self.embedding[np.asarray(codes)]

    def initial_state(self, batch, hh, ww):
        if self.cfg.variant == GRU_CONDITIONED:
            return np.zeros((batch, self.cfg.gru_channels, hh, ww), np.float32)
        if self.cfg.variant == FRAME_CONDITIONED:
            return np.zeros((batch, self.cfg.latent_channels, hh, ww), np.float32)
        return None

    def next_state(self, state, codes_frame):
        """Context for the next frame once ``codes_frame`` (``B x K x H x W``) is known."""
        if self.cfg.variant == UNCONDITIONAL:
            return None
        emb = np.ascontiguousarray(self.embed(codes_frame))
        if self.cfg.variant == FRAME_CONDITIONED:
            return emb
        return _exact.gru_step(emb, state, *self.gru)

    def condition_maps(self, context, batch, hh, ww):
        """``(CV, CH)`` arrays for one frame; zeros for the unconditional variant."""
        Ly, D = self.cfg.layers, self.cfg.hidden
        cv = np.zeros((Ly, batch, 2 * D, hh, ww), np.float32)
        ch = np.zeros_like(cv)
        if context is not None and self.cond:
            ctx = np.ascontiguousarray(context, dtype=np.float32)
            for l, (w, b) in enumerate(self.cond):
                out = _exact.conv_same(ctx, w, b)
                cv[l] = out[:, : 2 * D]
                ch[l] = out[:, 2 * D:]
        return cv, ch

    # -- evaluation -------------------------------------------------------
    def _buffers(self, batch, hh, ww):
        cfg = self.cfg
        Ly, K, D, L = cfg.layers, cfg.latent_channels, cfg.hidden, cfg.codebook_size
        cmax = max(K, D)
        return dict(
            VS=np.zeros((Ly + 1, batch, cmax, hh, ww), np.float32),
            HS=np.zeros((Ly + 1, batch, cmax, hh, ww), np.float32),
            VP=np.zeros((Ly, batch, 2 * D, hh, ww), np.float32),
            HO=np.zeros((Ly, batch, D, hh, ww), np.float32),
            LOG=np.zeros((batch, K * L, hh, ww), np.float32),
        )

    def frame_pmfs(self, codes_frame, cv, ch):
        """Layer-major pass over whole frames: ``B x K x H x W`` codes to ``B x K x H x W x L``."""
        cfg = self.cfg
        codes_frame = np.asarray(codes_frame)
        bsz, K, hh, ww = codes_frame.shape
        buf = self._buffers(bsz, hh, ww)
        emb = self.embed(np.maximum(codes_frame, 0))
        emb[codes_frame < 0] = 0
        buf["VS"][0, :, :K] = emb
        buf["HS"][0, :, :K] = emb
        _exact.full_forward(
            self.Wv, self.bv, self.Wh, self.bh, self.Wvh, self.bvh, self.Wr, self.br,
            self.Wo, self.bo, cv, ch, buf["VS"], buf["HS"], buf["VP"], buf["HO"], buf["LOG"],
            K, cfg.hidden_per_group, cfg.kernel // 2, cfg.codebook_size,
        )
        return _exact.softmax_groups(buf["LOG"], K, cfg.codebook_size)

    def teacher_forced(self, codes):
        """PMFs ``B x T x K x H x W x L`` for fully known codes ``B x T x K x H x W``."""
        codes = np.asarray(codes)
        bsz, t, _, hh, ww = codes.shape
        state = self.initial_state(bsz, hh, ww)
        out = []
        for i in range(t):
            cv, ch = self.condition_maps(state, bsz, hh, ww)
            out.append(self.frame_pmfs(codes[:, i], cv, ch))
            state = self.next_state(state, codes[:, i])
        return np.stack(out, 1)

    def conditional_at(self, codes_frame, position, context=None):
        """PMF ``B x L`` for symbol ``position = (c, r, w)`` of a partially known frame.

        ``codes_frame`` is ``B x K x H x W`` with ``-1`` at unknown entries;
        only the causal patch around the position is evaluated.
        """
        codes_frame = np.asarray(codes_frame)
        bsz, K, hh, ww = codes_frame.shape
        c, r, w = position
        R = self.cfg.receptive_radius
        r0, c0, c1 = max(0, r - R), max(0, w - R), min(ww, w + R + 1)
        patch = codes_frame[:, :, r0: r + 1, c0:c1].copy()
        pr, pw = r - r0, w - c0
        known_before = np.ones(patch.shape[2:], bool)
        known_before[pr, pw:] = False
        if (patch[:, :, known_before] < 0).any() or (patch[:, :c, pr, pw] < 0).any():
            raise ValueError(f"causal predecessor of {position} inside the receptive field is not decoded")
        # only causal entries may influence the result; blank the rest
        patch[:, :, pr, pw + 1:] = -1
        patch[:, c:, pr, pw] = -1
        cv, ch = self.condition_maps(context, bsz, hh, ww)
        cv = np.ascontiguousarray(cv[..., r0: r + 1, c0:c1])
        ch = np.ascontiguousarray(ch[..., r0: r + 1, c0:c1])
        return self.frame_pmfs(patch, cv, ch)[:, c, pr, pw]

    def sequential(self, batch, hh, ww):
        return SequentialPMF(self, batch, hh, ww)


class SequentialPMF:
    """Cached symbol-by-symbol evaluation of one latent frame at a time.

    Usage per frame: :meth:`start_frame`; then for every row :meth:`start_row`
    and, for every ``(w, c)`` in order, :meth:`pmf` followed by :meth:`set`.
    """

    def __init__(self, exact: ExactPrior, batch, hh, ww):
        self.exact = exact
        self.cfg = exact.cfg
        self.shape = (batch, hh, ww)
        self.state = exact.initial_state(batch, hh, ww)
        self.buf = None

    def start_frame(self):
        bsz, hh, ww = self.shape
        self.cv, self.ch = self.exact.condition_maps(self.state, bsz, hh, ww)
        self.buf = self.exact._buffers(bsz, hh, ww)
        self.codes = np.full((bsz, self.cfg.latent_channels, hh, ww), -1, np.int64)

    def start_row(self, r):
        e, cfg, b = self.exact, self.cfg, self.buf
        _exact.vertical_row(
            e.Wv, e.bv, self.cv, b["VS"], b["VP"], cfg.latent_channels, cfg.hidden_per_group,
            cfg.kernel // 2, r,
        )

    def pmf(self, r, w, c):
        e, cfg, b = self.exact, self.cfg, self.buf
        _exact.horizontal_group(
            e.Wh, e.bh, e.Wvh, e.bvh, e.Wr, e.br, e.Wo, e.bo, self.ch, b["HS"], b["VP"], b["HO"],
            b["LOG"], cfg.latent_channels, cfg.hidden_per_group, cfg.kernel // 2, cfg.codebook_size,
            r, w, c,
        )
        return _exact.softmax_at(b["LOG"], cfg.latent_channels, cfg.codebook_size, r, w, c)

    def set(self, r, w, c, symbols):
        symbols = np.asarray(symbols, dtype=np.int64)
        self.codes[:, c, r, w] = symbols
        val = self.exact.embedding[symbols]
        self.buf["VS"][0, :, c, r, w] = val
        self.buf["HS"][0, :, c, r, w] = val

    def end_frame(self):
        if (self.codes < 0).any():
            raise RuntimeError("frame finished with undecoded symbols")
        self.state = self.exact.next_state(self.state, self.codes)
        return self.codes
