import struct

import numpy as np
import pytest
import torch

from rdvc.autoencoder import AutoencoderConfig
from rdvc.codec import (FLAG_CRC, MAGIC, CodecError, ContainerHeader, EncodedVideo, decode_latents, decode_video,
                        encode_latents, encode_video, local_decode, rate_report, to_chunks)
from rdvc.codemodel import PriorConfig
from rdvc.model import ModelConfig, RDVideoModel
from conftest import tiny_model


def frames(T=10, H=16, W=24, seed=0, C=3):
    return torch.randint(0, 256, (T, C, H, W), generator=torch.Generator().manual_seed(seed), dtype=torch.uint8)


def randomize_prior(model, seed=0):
    torch.manual_seed(seed)
    with torch.no_grad():
        for p in model.prior.parameters():
            p.add_(0.3 * torch.randn_like(p))
    return model


@pytest.mark.parametrize("variant", ["unconditional", "frame_conditioned", "gru_conditioned"])
def test_roundtrip_latents_and_frames(variant):
    model = randomize_prior(tiny_model(variant=variant))
    x = frames()
    data = encode_video(x, model, chunk_T=4).to_bytes()
    codes = decode_latents(data, model)
    assert np.array_equal(codes, encode_latents(model, to_chunks(x.float(), 4)).numpy())
    out = decode_video(data, model)
    assert out.dtype == torch.uint8 and out.shape == x.shape
    assert torch.equal(out, local_decode(x, model, chunk_T=4))


def test_chunk_independence():
    model = randomize_prior(tiny_model(variant="gru_conditioned"))
    x = frames(T=8)
    both = encode_video(x, model, chunk_T=4)
    second = encode_video(x[4:], model, chunk_T=4)
    assert both.streams[1] == second.streams[0]


def test_deterministic_bytes():
    model = randomize_prior(tiny_model())
    x = frames(T=5)
    assert encode_video(x, model).to_bytes() == encode_video(x, model).to_bytes()


def test_header_layout():
    model = tiny_model()
    data = encode_video(frames(T=3), model, chunk_T=2).to_bytes()
    assert data[:4] == MAGIC and data[4] == 1
    T, C, H, W = struct.unpack_from("<4H", data, 5)
    assert (T, C, H, W) == (3, 3, 16, 24)
    K, L, s, prior = data[13:17]
    assert (K, L, s, prior) == (4, 8, 8, 1)
    assert data[17:25] == model.model_hash()
    hd = ContainerHeader.unpack(data)
    assert hd.chunk_T == 2 and hd.flags == FLAG_CRC
    assert np.array_equal(hd.centers, model.codebook.centers.detach().numpy())
    assert len(data) == hd.size + hd.payload_len + 4


def test_empty_video():
    model = tiny_model()
    data = encode_video(torch.zeros(0, 3, 16, 16), model).to_bytes()
    out = decode_video(data, model)
    assert out.shape == (0, 3, 16, 16)


def test_unknown_version_and_magic():
    model = tiny_model()
    data = bytearray(encode_video(frames(T=2), model).to_bytes())
    bad = bytearray(data)
    bad[4] = 9
    with pytest.raises(CodecError, match="version"):
        EncodedVideo.from_bytes(bytes(bad))
    bad = bytearray(data)
    bad[:4] = b"XXXX"
    with pytest.raises(CodecError, match="magic"):
        EncodedVideo.from_bytes(bytes(bad))
    with pytest.raises(CodecError):
        EncodedVideo.from_bytes(b"NV")


def test_tamper_detected():
    model = randomize_prior(tiny_model())
    x = frames(T=4)
    enc = encode_video(x, model)
    data = bytearray(enc.to_bytes())
    data[enc.header.size + 10] ^= 0x5A
    with pytest.raises(CodecError, match="checksum"):
        decode_video(bytes(data), model)


def test_tamper_without_checksum_changes_latents_or_fails():
    model = randomize_prior(tiny_model())
    x = frames(T=4)
    enc = encode_video(x, model, checksum=False)
    data = bytearray(enc.to_bytes())
    data[enc.header.size + 4 + 3] ^= 0xFF
    try:
        codes = decode_latents(bytes(data), model)
    except CodecError:
        return
    assert not np.array_equal(codes, encode_latents(model, to_chunks(x.float(), 8)).numpy())


def test_truncation_rejected():
    model = randomize_prior(tiny_model())
    data = encode_video(frames(T=4), model).to_bytes()
    with pytest.raises(CodecError, match="length"):
        decode_video(data[:-7], model)


def test_truncated_stream_names_symbol():
    model = randomize_prior(tiny_model())
    enc = encode_video(frames(T=8), model, checksum=False)
    enc.streams[0] = enc.streams[0][: len(enc.streams[0]) // 3]
    with pytest.raises(CodecError, match="symbol"):
        decode_latents(enc, model)


def test_hash_mismatch_refused():
    a, b = tiny_model(seed=0), tiny_model(seed=1)
    data = encode_video(frames(T=2), a).to_bytes()
    with pytest.raises(CodecError, match="hash mismatch"):
        decode_video(data, b)


def test_bad_dimensions():
    model = tiny_model()
    with pytest.raises(CodecError, match="divisible"):
        encode_video(torch.zeros(2, 3, 12, 16), model)
    with pytest.raises(CodecError, match="channels"):
        encode_video(torch.zeros(2, 1, 16, 16), model)


def test_uniform_prior_payload_and_proxy():
    torch.manual_seed(0)
    cfg = ModelConfig(AutoencoderConfig(hidden_channels=8, first_channels=8, residual_blocks=1),
                      PriorConfig(hidden_per_group=1))
    model = RDVideoModel(cfg).eval()
    x = frames(T=8, H=160, W=160)
    enc = encode_video(x, model)
    stream_bits = 8 * len(enc.streams[0])
    assert 307200 <= stream_bits <= 307200 + 64
    rep = rate_report(x, model, encoded=enc)
    assert isinstance(rep.proxy_bpp, float)
    # float32 log-softmax rounds log(1/8) in the ninth digit
    assert rep.proxy_bpp == pytest.approx(1.5, abs=1e-6)
    assert rep.actual_bpp * 8 * 160 * 160 >= rep.proxy_bpp * 8 * 160 * 160 - 64
    assert rep.actual_bpp_with_header > rep.actual_bpp


def test_actual_at_least_proxy_with_slack():
    model = randomize_prior(tiny_model())
    x = frames(T=8, H=32, W=32)
    rep = rate_report(x, model)
    assert rep.actual_bpp * 8 * 32 * 32 >= rep.proxy_bpp * 8 * 32 * 32 - 64
