"""PMF quantization and a byte-oriented range coder.

The coder follows the LZMA design: a ``low`` accumulator with one carry bit
above the range width, a cached output byte and a run of pending 0xFF bytes
so carries can be propagated after the fact.  The range is 64 bits wide, so
the truncation ``range >> 16`` wastes under 2**-40 bits per symbol and long
streams stay within a few bytes of the ideal length.  Probabilities are
integer counts summing to ``2**16``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION
RANGE_BITS = 64
_BYTES = RANGE_BITS // 8
_TOP = 1 << (RANGE_BITS - 8)
_FULL = (1 << RANGE_BITS) - 1
_HIGH = 0xFF << (RANGE_BITS - 8)


class TruncatedStreamError(ValueError):
    pass


@dataclass(frozen=True)
class QuantizedPMF:
    counts: np.ndarray
    cumulative: np.ndarray

    @classmethod
    def from_probs(cls, p):
        counts = quantize_pmf(p)
        return cls(counts, cumulative(counts))

    def __len__(self):
        return self.counts.shape[-1]


def quantize_pmf(p):
    """Integer counts ``... x L`` summing to ``2**16`` exactly, each at least 1.

    ``counts = 1 + round(p * (2**16 - L))``: the reserved unit per symbol is
    the floor, and the small rounding difference to the total is absorbed by
    the largest count (first one on ties).
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 0 or p.shape[-1] < 2:
        raise ValueError("a PMF needs at least two symbols")
    L = p.shape[-1]
    if L > TOTAL // 2:
        raise ValueError(f"alphabet of {L} symbols exceeds the {PRECISION}-bit precision")
    if not np.isfinite(p).all() or (p < 0).any():
        raise ValueError("PMF entries must be finite and nonnegative")
    counts = 1 + np.rint(p * (TOTAL - L)).astype(np.int64)
    diff = TOTAL - counts.sum(-1)
    top = counts.argmax(-1)
    np.put_along_axis(counts, top[..., None], np.take_along_axis(counts, top[..., None], -1) + diff[..., None], -1)
    if (counts < 1).any():
        raise ValueError("PMF too far from normalized to quantize")
    return counts


def cumulative(counts):
    counts = np.asarray(counts, dtype=np.int64)
    cum = np.zeros(counts.shape[:-1] + (counts.shape[-1] + 1,), np.int64)
    np.cumsum(counts, axis=-1, out=cum[..., 1:])
    return cum


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _FULL
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()
        self.finished = False

    def _shift_low(self):
        low = self.low
        if low < _HIGH or low > _FULL:
            carry = low >> RANGE_BITS
            temp = self.cache
            out = self.out
            while True:
                out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (low >> (RANGE_BITS - 8)) & 0xFF
        self.cache_size += 1
        self.low = (low & (_TOP - 1)) << 8

    def encode(self, start, freq):
        """Code the slice ``[start, start + freq)`` of ``2**16``."""
        if self.finished:
            raise RuntimeError("encoder already finished")
        r = self.range >> PRECISION
        self.low += r * start
        self.range = r * freq
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def encode_symbol(self, pmf: QuantizedPMF, symbol):
        if not 0 <= symbol < len(pmf):
            raise ValueError(f"symbol {symbol} outside alphabet of {len(pmf)}")
        cum = pmf.cumulative
        self.encode(int(cum[symbol]), int(cum[symbol + 1] - cum[symbol]))

    def finish(self):
        """Flush and return the stream; at most 8 tail bytes are added."""
        if not self.finished:
            # the value in [low, low + range) with the most trailing zero bytes
            for k in range(RANGE_BITS, -1, -8):
                v = ((self.low + (1 << k) - 1) >> k) << k
                if v < self.low + self.range:
                    break
            self.low = v
            for _ in range(_BYTES + 1):
                self._shift_low()
            # the decoder reads missing tail bytes as zeros
            tail = 0
            while tail < _BYTES and self.out and self.out[-1] == 0:
                self.out.pop()
                tail += 1
            self.finished = True
        # the first byte is always zero: low cannot carry before the first shift
        return bytes(self.out[1:])


class RangeDecoder:
    def __init__(self, data):
        self.data = bytes(data)
        self.pos = 0
        self.range = _FULL
        self.code = 0
        for _ in range(_BYTES):
            self.code = (self.code << 8) | self._byte()

    def _byte(self):
        pos = self.pos
        self.pos += 1
        if pos < len(self.data):
            return self.data[pos]
        if pos >= len(self.data) + _BYTES:
            raise TruncatedStreamError(f"stream truncated: read past byte {len(self.data)}")
        return 0

    def target(self):
        """Value in ``[0, 2**16)`` locating the next symbol; call :meth:`consume` after."""
        self._r = self.range >> PRECISION
        return min(self.code // self._r, TOTAL - 1)

    def consume(self, start, freq):
        r = self._r
        self.code -= r * start
        self.range = r * freq
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._byte()) & _FULL
            self.range <<= 8

    def decode_symbol(self, pmf: QuantizedPMF):
        v = self.target()
        cum = pmf.cumulative
        s = int(np.searchsorted(cum, v, side="right")) - 1
        self.consume(int(cum[s]), int(cum[s + 1] - cum[s]))
        return s


def encode_symbols(symbols, probs):
    """Code ``N`` symbols with per-symbol PMFs ``N x L`` (floats, quantized here)."""
    counts = quantize_pmf(probs)
    cum = cumulative(counts).tolist()
    enc = RangeEncoder()
    for s, c in zip(np.asarray(symbols).tolist(), cum):
        enc.encode(c[s], c[s + 1] - c[s])
    return enc.finish()


def decode_symbols(data, probs):
    counts = quantize_pmf(probs)
    cum = cumulative(counts)
    dec = RangeDecoder(data)
    out = np.empty(len(cum), np.int64)
    for i, c in enumerate(cum):
        v = dec.target()
        s = int(np.searchsorted(c, v, side="right")) - 1
        dec.consume(int(c[s]), int(c[s + 1] - c[s]))
        out[i] = s
    return out


def ideal_bits(symbols, counts):
    """``sum -log2(count_s / 2**16)`` of a symbol sequence under quantized PMFs."""
    counts = np.asarray(counts)
    picked = np.take_along_axis(counts, np.asarray(symbols)[:, None], -1)[:, 0]
    return float(-np.log2(picked / TOTAL).sum())
