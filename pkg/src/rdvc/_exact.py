"""Fixed-order float32 kernels for the code model's coding path.

Library convolutions pick different reduction orders for different tensor
shapes, so an output computed on a crop or one position at a time can differ
in the last bit from the same output computed on a full frame.  A single
flipped bit can change a quantized count and desynchronize the arithmetic
coder.  Every output element here is produced by one element function that
sums its terms in a fixed order, so any schedule (whole frame, cropped
patch, one position at a time) yields bitwise-identical values.

Array conventions (``Ly`` layers, ``B`` frames, ``D = K * h`` hidden):

* ``VS``/``HS``: ``(Ly + 1, B, Cmax, H, W)`` vertical / horizontal stacks;
  slot 0 holds the embedded codes, slot ``l + 1`` the output of layer ``l``.
* ``VP``: ``(Ly, B, 2D, H, W)`` vertical pre-activations.
* ``HO``: ``(Ly, B, D, H, W)`` gated horizontal features.
* ``CV``/``CH``: ``(Ly, B, 2D, H, W)`` conditioning added before each gate.
* ``LOG``: ``(B, K * L, H, W)`` output logits.
"""
import math

import numpy as np
from numba import njit

_ONE = np.float32(1.0)


@njit(cache=True, inline="always")
def _gate(a, s):
    t = np.float32(math.tanh(a))
    g = _ONE / (_ONE + np.float32(math.exp(-s)))
    return t * g


@njit(cache=True, inline="always")
def _vpre(Wv, bv, CV, VS, l, b, o, r, w, cin, k2, k):
    W = VS.shape[4]
    nrows = k2 if l == 0 else k2 + 1
    acc = bv[l, o]
    for ci in range(cin):
        for ky in range(nrows):
            rr = r - k2 + ky
            if rr < 0:
                continue
            for kx in range(k):
                cc = w - k2 + kx
                if cc < 0 or cc >= W:
                    continue
                acc += Wv[l, o, ci, ky, kx] * VS[l, b, ci, rr, cc]
    return acc + CV[l, b, o, r, w]


@njit(cache=True, inline="always")
def _hpre(Wh, bh, Wvh, bvh, CH, HS, VP, l, b, o, r, w, cin, h, k2):
    og = o // (2 * h)
    acc = bh[l, o]
    for ci in range(cin):
        ig = ci if l == 0 else ci // h
        for kx in range(k2 + 1):
            cc = w - k2 + kx
            if cc < 0:
                continue
            if kx == k2:
                if l == 0:
                    if ig >= og:
                        continue
                elif ig > og:
                    continue
            acc += Wh[l, o, ci, kx] * HS[l, b, ci, r, cc]
    acc2 = bvh[l, o]
    for ci in range(VP.shape[2]):
        acc2 += Wvh[l, o, ci] * VP[l, b, ci, r, w]
    return acc + acc2 + CH[l, b, o, r, w]


@njit(cache=True, inline="always")
def _hres(Wr, br, HO, HS, l, b, o, r, w, h):
    og = o // h
    acc = br[l, o]
    for ci in range((og + 1) * h):
        acc += Wr[l, o, ci] * HO[l, b, ci, r, w]
    if l == 0:
        return acc
    return HS[l, b, o, r, w] + acc


@njit(cache=True, inline="always")
def _head(Wo, bo, HS, b, o, r, w, h, L, top):
    og = o // L
    acc = bo[o]
    for ci in range((og + 1) * h):
        acc += Wo[o, ci] * HS[top, b, ci, r, w]
    return acc


@njit(cache=True)
def full_forward(Wv, bv, Wh, bh, Wvh, bvh, Wr, br, Wo, bo, CV, CH, VS, HS, VP, HO, LOG, K, h, k2, L):
    """Layer-major evaluation over every position of every frame."""
    Ly = VP.shape[0]
    B = VS.shape[1]
    H = VS.shape[3]
    W = VS.shape[4]
    D = K * h
    k = 2 * k2 + 1
    hp = np.empty(2 * D, dtype=np.float32)
    for l in range(Ly):
        cin = K if l == 0 else D
        for b in range(B):
            for r in range(H):
                for w in range(W):
                    for o in range(2 * D):
                        VP[l, b, o, r, w] = _vpre(Wv, bv, CV, VS, l, b, o, r, w, cin, k2, k)
                    for g in range(K):
                        for m in range(h):
                            VS[l + 1, b, g * h + m, r, w] = _gate(
                                VP[l, b, g * 2 * h + m, r, w], VP[l, b, g * 2 * h + h + m, r, w]
                            )
        for b in range(B):
            for r in range(H):
                for w in range(W):
                    for o in range(2 * D):
                        hp[o] = _hpre(Wh, bh, Wvh, bvh, CH, HS, VP, l, b, o, r, w, cin, h, k2)
                    for g in range(K):
                        for m in range(h):
                            HO[l, b, g * h + m, r, w] = _gate(hp[g * 2 * h + m], hp[g * 2 * h + h + m])
                    for o in range(D):
                        HS[l + 1, b, o, r, w] = _hres(Wr, br, HO, HS, l, b, o, r, w, h)
    for b in range(B):
        for r in range(H):
            for w in range(W):
                for o in range(K * L):
                    LOG[b, o, r, w] = _head(Wo, bo, HS, b, o, r, w, h, L, Ly)


@njit(cache=True)
def vertical_row(Wv, bv, CV, VS, VP, K, h, k2, r):
    """Vertical stack for row ``r``; needs every row above ``r`` decoded."""
    Ly = VP.shape[0]
    B = VS.shape[1]
    W = VS.shape[4]
    D = K * h
    k = 2 * k2 + 1
    for l in range(Ly):
        cin = K if l == 0 else D
        for b in range(B):
            for w in range(W):
                for o in range(2 * D):
                    VP[l, b, o, r, w] = _vpre(Wv, bv, CV, VS, l, b, o, r, w, cin, k2, k)
                for g in range(K):
                    for m in range(h):
                        VS[l + 1, b, g * h + m, r, w] = _gate(
                            VP[l, b, g * 2 * h + m, r, w], VP[l, b, g * 2 * h + h + m, r, w]
                        )


@njit(cache=True)
def horizontal_group(Wh, bh, Wvh, bvh, Wr, br, Wo, bo, CH, HS, VP, HO, LOG, K, h, k2, L, r, w, c):
    """Horizontal stack and logits for channel group ``c`` at ``(r, w)``.

    Groups below ``c`` at this position must already have been computed by
    earlier calls, which is what the coding order guarantees.
    """
    Ly = VP.shape[0]
    B = HS.shape[1]
    D = K * h
    hp = np.empty(2 * h, dtype=np.float32)
    for l in range(Ly):
        cin = K if l == 0 else D
        for b in range(B):
            for j in range(2 * h):
                hp[j] = _hpre(Wh, bh, Wvh, bvh, CH, HS, VP, l, b, c * 2 * h + j, r, w, cin, h, k2)
            for m in range(h):
                HO[l, b, c * h + m, r, w] = _gate(hp[m], hp[h + m])
            for m in range(h):
                HS[l + 1, b, c * h + m, r, w] = _hres(Wr, br, HO, HS, l, b, c * h + m, r, w, h)
    for b in range(B):
        for j in range(L):
            LOG[b, c * L + j, r, w] = _head(Wo, bo, HS, b, c * L + j, r, w, h, L, Ly)


@njit(cache=True)
def softmax_groups(LOG, K, L):
    """``(B, K*L, H, W)`` float32 logits to ``(B, K, H, W, L)`` float64 PMFs."""
    B, _, H, W = LOG.shape
    out = np.empty((B, K, H, W, L))
    for b in range(B):
        for c in range(K):
            for r in range(H):
                for w in range(W):
                    mx = -np.inf
                    for j in range(L):
                        v = np.float64(LOG[b, c * L + j, r, w])
                        if v > mx:
                            mx = v
                    s = 0.0
                    for j in range(L):
                        e = math.exp(np.float64(LOG[b, c * L + j, r, w]) - mx)
                        out[b, c, r, w, j] = e
                        s += e
                    for j in range(L):
                        out[b, c, r, w, j] /= s
    return out


@njit(cache=True)
def softmax_at(LOG, K, L, r, w, c):
    B = LOG.shape[0]
    out = np.empty((B, L))
    for b in range(B):
        mx = -np.inf
        for j in range(L):
            v = np.float64(LOG[b, c * L + j, r, w])
            if v > mx:
                mx = v
        s = 0.0
        for j in range(L):
            e = math.exp(np.float64(LOG[b, c * L + j, r, w]) - mx)
            out[b, j] = e
            s += e
        for j in range(L):
            out[b, j] /= s
    return out


@njit(cache=True)
def conv_same(x, wt, bias):
    """Same-padded stride-1 2D convolution with a fixed summation order."""
    B, cin, H, W = x.shape
    cout, _, kh, kw = wt.shape
    ph = kh // 2
    pw = kw // 2
    out = np.empty((B, cout, H, W), dtype=np.float32)
    for b in range(B):
        for o in range(cout):
            for r in range(H):
                for w in range(W):
                    acc = bias[o]
                    for ci in range(cin):
                        for ky in range(kh):
                            rr = r - ph + ky
                            if rr < 0 or rr >= H:
                                continue
                            for kx in range(kw):
                                cc = w - pw + kx
                                if cc < 0 or cc >= W:
                                    continue
                                acc += wt[o, ci, ky, kx] * x[b, ci, rr, cc]
                    out[b, o, r, w] = acc
    return out


@njit(cache=True)
def gru_step(x, hid, gw, gb, cw, cb):
    """Convolutional GRU update mirroring :func:`rdvc.nncore.conv_gru_step`."""
    B, cx, H, W = x.shape
    ch = hid.shape[1]
    xh = np.empty((B, cx + ch, H, W), dtype=np.float32)
    xh[:, :cx] = x
    xh[:, cx:] = hid
    gates = conv_same(xh, gw, gb)
    for idx in np.ndindex(gates.shape):
        gates[idx] = _ONE / (_ONE + np.float32(math.exp(-gates[idx])))
    for b in range(B):
        for j in range(ch):
            for r in range(H):
                for w in range(W):
                    xh[b, cx + j, r, w] = gates[b, ch + j, r, w] * hid[b, j, r, w]
    cand = conv_same(xh, cw, cb)
    out = np.empty_like(hid)
    for b in range(B):
        for j in range(ch):
            for r in range(H):
                for w in range(W):
                    u = gates[b, j, r, w]
                    n = np.float32(math.tanh(cand[b, j, r, w]))
                    out[b, j, r, w] = (_ONE - u) * hid[b, j, r, w] + u * n
    return out
