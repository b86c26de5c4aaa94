"""Bitstream container and the encode/decode pipeline.

Container layout, all little-endian::

    magic "NVC1" | version u8 | T C H W u16 | K L s u8 | prior u8 | model hash 8s
    | chunk_T u8 | flags u8 | centers L x f32 | payload_len u64
    | payload | crc32 u32 (if flags & 1)

``T`` is the true frame count; the encoder pads the last chunk by repeating
the final frame and the decoder trims it.  The payload is a table of
``u32`` stream lengths, one per chunk, followed by the chunk streams.
Chunks are independent: the prior's temporal state restarts at each one.

Symbols of a chunk are coded frame by frame in raster order over latent
positions with the channel index innermost, using PMFs from the exact prior
path.  All chunks advance in lockstep so the prior is evaluated once per
position for the whole batch.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np
import torch

from .codemodel import FRAME_CONDITIONED, GRU_CONDITIONED, UNCONDITIONAL
from .entropy import RangeDecoder, RangeEncoder, TruncatedStreamError, cumulative, quantize_pmf
from .model import model_hash

MAGIC = b"NVC1"
VERSION = 1
FLAG_CRC = 1
PRIOR_TAGS = {UNCONDITIONAL: 0, FRAME_CONDITIONED: 1, GRU_CONDITIONED: 2}
_FIXED = struct.Struct("<4sB4H3BB8sBB")


class CodecError(ValueError):
    pass


@dataclass
class ContainerHeader:
    T: int
    C: int
    H: int
    W: int
    K: int
    L: int
    s: int
    prior: int
    model_hash: bytes
    chunk_T: int
    flags: int
    centers: np.ndarray
    payload_len: int = 0
    version: int = VERSION

    def pack(self):
        head = _FIXED.pack(
            MAGIC, self.version, self.T, self.C, self.H, self.W, self.K, self.L, self.s,
            self.prior, self.model_hash, self.chunk_T, self.flags,
        )
        centers = np.asarray(self.centers, dtype="<f4").tobytes()
        return head + centers + struct.pack("<Q", self.payload_len)

    @property
    def size(self):
        return _FIXED.size + 4 * self.L + 8

    @classmethod
    def unpack(cls, data):
        if len(data) < _FIXED.size:
            raise CodecError("stream too short for a container header")
        magic, version, *rest = _FIXED.unpack_from(data)
        if magic != MAGIC:
            raise CodecError(f"not an NVC stream (magic {magic!r})")
        if version != VERSION:
            raise CodecError(f"unsupported container version {version}")
        T, C, H, W, K, L, s, prior, mhash, chunk_T, flags = rest
        off = _FIXED.size
        if len(data) < off + 4 * L + 8:
            raise CodecError("stream truncated inside the header")
        centers = np.frombuffer(data, dtype="<f4", count=L, offset=off).astype(np.float32)
        (payload_len,) = struct.unpack_from("<Q", data, off + 4 * L)
        if chunk_T < 1 or s < 1 or H % s or W % s:
            raise CodecError("inconsistent header geometry")
        return cls(T, C, H, W, K, L, s, prior, mhash, chunk_T, flags, centers, payload_len, version)


@dataclass
class EncodedVideo:
    header: ContainerHeader
    streams: list

    def payload(self):
        table = struct.pack(f"<{len(self.streams)}I", *[len(s) for s in self.streams])
        return table + b"".join(self.streams)

    def to_bytes(self):
        payload = self.payload()
        self.header.payload_len = len(payload)
        out = self.header.pack() + payload
        if self.header.flags & FLAG_CRC:
            out += struct.pack("<I", zlib.crc32(payload))
        return out

    @classmethod
    def from_bytes(cls, data):
        data = bytes(data)
        header = ContainerHeader.unpack(data)
        start = header.size
        tail = 4 if header.flags & FLAG_CRC else 0
        if len(data) != start + header.payload_len + tail:
            raise CodecError(
                f"payload length mismatch: header says {header.payload_len} bytes, "
                f"{len(data) - start - tail} present"
            )
        payload = data[start: start + header.payload_len]
        if tail:
            (crc,) = struct.unpack_from("<I", data, start + header.payload_len)
            if crc != zlib.crc32(payload):
                raise CodecError("payload checksum mismatch")
        n = num_chunks(header.T, header.chunk_T)
        if len(payload) < 4 * n:
            raise CodecError("payload truncated inside the chunk table")
        lengths = struct.unpack_from(f"<{n}I", payload)
        pos, streams = 4 * n, []
        for ln in lengths:
            if pos + ln > len(payload):
                raise CodecError("payload truncated inside a chunk stream")
            streams.append(payload[pos: pos + ln])
            pos += ln
        if pos != len(payload):
            raise CodecError("trailing bytes after the last chunk stream")
        return cls(header, streams)

    @property
    def nbytes(self):
        return self.header.size + 4 * len(self.streams) + sum(map(len, self.streams)) + (
            4 if self.header.flags & FLAG_CRC else 0
        )


def num_chunks(T, chunk_T):
    return -(-T // chunk_T)


def as_frames(frames):
    """``T x C x H x W`` float32 tensor from uint8/float arrays or tensors."""
    x = torch.as_tensor(np.asarray(frames) if not torch.is_tensor(frames) else frames)
    if x.dim() != 4:
        raise CodecError(f"expected T x C x H x W frames, got shape {tuple(x.shape)}")
    return x.to(torch.float32)


def to_chunks(frames, chunk_T):
    """Split into ``N x chunk_T x C x H x W``, padding with copies of the last frame."""
    T = frames.shape[0]
    n = num_chunks(T, chunk_T)
    if n == 0:
        return frames.new_zeros(0, chunk_T, *frames.shape[1:])
    pad = n * chunk_T - T
    if pad:
        frames = torch.cat([frames, frames[-1:].expand(pad, *frames.shape[1:])])
    return frames.reshape(n, chunk_T, *frames.shape[1:])


def _check_model(frames, model):
    _, C, H, W = frames.shape
    s = model.cfg.ae.spatial_stride
    if H % s or W % s:
        raise CodecError(f"frame size {H}x{W} is not divisible by {s}; crop first")
    if C != model.cfg.ae.input_channels:
        raise CodecError(f"model expects {model.cfg.ae.input_channels} channels, frames have {C}")
    if max(frames.shape[0], C, H, W) > 0xFFFF:
        raise CodecError("dimensions exceed the container's 16-bit fields")


class _Eval:
    """Run a model in eval mode without gradients, restoring its mode after."""

    def __init__(self, model):
        self.model = model

    def __enter__(self):
        self.was_training = self.model.training
        self.model.eval()
        self.grad = torch.is_grad_enabled()
        torch.set_grad_enabled(False)
        return self.model

    def __exit__(self, *exc):
        torch.set_grad_enabled(self.grad)
        self.model.train(self.was_training)


def encode_latents(model, chunks, batch=8):
    """Hard codes ``N x T x K x h x w`` for ``N`` chunks."""
    with _Eval(model):
        parts = [model.encode_codes(chunks[i: i + batch]) for i in range(0, len(chunks), batch)]
    if not parts:
        return torch.zeros(0, dtype=torch.int64)
    return torch.cat(parts)


def reconstruct_chunks(model, codes, T=None):
    """Decoded ``T x C x H x W`` uint8 frames from ``N x chunk_T x K x h x w`` codes.

    Each chunk is decoded on its own, so the result never depends on how many
    chunks are decoded together.
    """
    codes = torch.as_tensor(codes)
    frames = []
    with _Eval(model):
        for chunk in codes:
            x = model.reconstruct(chunk[None])[0]
            frames.append(torch.round(x.clamp(0, 255)).to(torch.uint8))
    C, s = model.cfg.ae.input_channels, model.cfg.ae.spatial_stride
    if not frames:
        return torch.zeros(0, C, codes.shape[-2] * s if codes.dim() == 5 else 0,
                           codes.shape[-1] * s if codes.dim() == 5 else 0, dtype=torch.uint8)
    out = torch.cat(frames)
    return out if T is None else out[:T]


def _code_chunks(exact, shape, on_pmf):
    """Walk every symbol of ``N`` chunks in coding order.

    ``on_pmf(index, (t, c, r, w), cum)`` receives the ``N x (L+1)`` cumulative
    counts and returns the ``N`` symbols at that position.
    """
    n, chunk_T, K, hh, ww = shape
    seq = exact.sequential(n, hh, ww)
    codes = np.zeros(shape, np.int64)
    index = 0
    for t in range(chunk_T):
        seq.start_frame()
        for r in range(hh):
            seq.start_row(r)
            for w in range(ww):
                for c in range(K):
                    cum = cumulative(quantize_pmf(seq.pmf(r, w, c)))
                    sym = on_pmf(index, (t, c, r, w), cum)
                    seq.set(r, w, c, sym)
                    codes[:, t, c, r, w] = sym
                    index += 1
        seq.end_frame()
    return codes


def encode_video(frames, model, chunk_T=8, checksum=True):
    """Encode ``T x C x H x W`` frames (0..255) into an :class:`EncodedVideo`."""
    frames = as_frames(frames)
    _check_model(frames, model)
    if not 1 <= chunk_T <= 255:
        raise CodecError(f"chunk_T must be in 1..255, got {chunk_T}")
    T, C, H, W = frames.shape
    cfg = model.cfg
    header = ContainerHeader(
        T=T, C=C, H=H, W=W, K=cfg.latent_channels, L=cfg.codebook_size, s=cfg.ae.spatial_stride,
        prior=PRIOR_TAGS[cfg.prior.variant], model_hash=model_hash(model), chunk_T=chunk_T,
        flags=FLAG_CRC if checksum else 0, centers=model.codebook.centers.detach().numpy(),
    )
    chunks = to_chunks(frames, chunk_T)
    if len(chunks) == 0:
        return EncodedVideo(header, [])
    codes = encode_latents(model, chunks).numpy()
    encoders = [RangeEncoder() for _ in range(len(codes))]

    def emit(index, pos, cum):
        t, c, r, w = pos
        sym = codes[:, t, c, r, w]
        for i, enc in enumerate(encoders):
            s = sym[i]
            enc.encode(int(cum[i, s]), int(cum[i, s + 1] - cum[i, s]))
        return sym

    with _Eval(model):
        coded = _code_chunks(model.exact_prior(), codes.shape, emit)
    assert (coded == codes).all()
    return EncodedVideo(header, [e.finish() for e in encoders])


def decode_latents(encoded, model):
    """Latent codes ``N x chunk_T x K x h x w`` from an :class:`EncodedVideo` (or bytes)."""
    if isinstance(encoded, (bytes, bytearray, memoryview)):
        encoded = EncodedVideo.from_bytes(encoded)
    hd = encoded.header
    cfg = model.cfg
    if hd.model_hash != model_hash(model):
        raise CodecError(
            f"model hash mismatch: stream was encoded with {hd.model_hash.hex()}, "
            f"model is {model_hash(model).hex()}"
        )
    expect = (hd.C, hd.K, hd.L, hd.s, hd.prior)
    have = (cfg.ae.input_channels, cfg.latent_channels, cfg.codebook_size, cfg.ae.spatial_stride,
            PRIOR_TAGS[cfg.prior.variant])
    if expect != have:
        raise CodecError(f"stream geometry {expect} does not match model {have}")
    n = len(encoded.streams)
    shape = (n, hd.chunk_T, hd.K, hd.H // hd.s, hd.W // hd.s)
    if n == 0:
        return np.zeros(shape, np.int64)
    decoders = [RangeDecoder(s) for s in encoded.streams]

    def read(index, pos, cum):
        sym = np.empty(n, np.int64)
        for i, dec in enumerate(decoders):
            try:
                v = dec.target()
                s = int(np.searchsorted(cum[i], v, side="right")) - 1
                dec.consume(int(cum[i, s]), int(cum[i, s + 1] - cum[i, s]))
            except TruncatedStreamError as e:
                raise CodecError(f"chunk {i}: stream truncated at symbol {index} {pos}") from e
            sym[i] = s
        return sym

    with _Eval(model):
        return _code_chunks(model.exact_prior(), shape, read)


def decode_video(encoded, model):
    """Reconstructed ``T x C x H x W`` uint8 frames."""
    if isinstance(encoded, (bytes, bytearray, memoryview)):
        encoded = EncodedVideo.from_bytes(encoded)
    codes = decode_latents(encoded, model)
    hd = encoded.header
    if len(codes) == 0:
        return torch.zeros(0, hd.C, hd.H, hd.W, dtype=torch.uint8)
    return reconstruct_chunks(model, codes, hd.T)


def local_decode(frames, model, chunk_T=8):
    """The reconstruction the codec must reproduce, without entropy coding."""
    frames = as_frames(frames)
    codes = encode_latents(model, to_chunks(frames, chunk_T))
    return reconstruct_chunks(model, codes, frames.shape[0])


def proxy_bits(model, codes):
    """``-sum log2 p`` of codes under the training (teacher-forced) prior path."""
    total = 0.0
    with _Eval(model):
        for chunk in torch.as_tensor(codes):
            lp = model.log_pmfs(chunk[None]).double()
            total += float(-lp.gather(-1, chunk[None, ..., None]).sum()) / np.log(2.0)
    return total


@dataclass
class RateReport:
    proxy_bpp: float
    actual_bpp: float
    actual_bpp_with_header: float
    nbytes: int


def rate_report(frames, model, chunk_T=8, encoded=None):
    """Proxy bpp from the rate loss vs actual bpp of the coded streams.

    ``actual_bpp`` counts only the arithmetic-coded chunk streams;
    ``actual_bpp_with_header`` counts the whole file.
    """
    frames = as_frames(frames)
    T, _, H, W = frames.shape
    pixels = max(1, T * H * W)
    if encoded is None:
        encoded = encode_video(frames, model, chunk_T)
    codes = encode_latents(model, to_chunks(frames, encoded.header.chunk_T))
    stream_bits = 8 * sum(len(s) for s in encoded.streams)
    return RateReport(
        proxy_bpp=float(proxy_bits(model, codes)) / pixels,
        actual_bpp=stream_bits / pixels,
        actual_bpp_with_header=8 * encoded.nbytes / pixels,
        nbytes=encoded.nbytes,
    )
