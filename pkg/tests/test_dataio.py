import os

import numpy as np
import pytest
import torch

from rdvc import dataio
from rdvc.dataio import DataError


def test_known_pixels(tmp_path):
    x = torch.arange(3 * 3 * 2 * 2, dtype=torch.uint8).reshape(3, 3, 2, 2)
    dataio.write_frames(x, tmp_path)
    assert sorted(os.listdir(tmp_path)) == [f"frame_{i:05d}.ppm" for i in range(3)]
    assert torch.equal(dataio.load_frames(str(tmp_path)), x)


def test_byte_exact_roundtrip(tmp_path):
    src, dst = tmp_path / "a", tmp_path / "b"
    x = torch.randint(0, 256, (4, 3, 5, 7), dtype=torch.uint8)
    dataio.write_frames(x, src)
    dataio.write_frames(dataio.load_frames(str(src)), dst)
    for name in os.listdir(src):
        assert (src / name).read_bytes() == (dst / name).read_bytes()


def test_reads_commented_header(tmp_path):
    p = tmp_path / "f.ppm"
    p.write_bytes(b"P6\n# made by hand\n2 1\n255\n" + bytes(range(6)))
    assert dataio.read_pnm(p).tolist() == [[[0, 1, 2], [3, 4, 5]]]


def test_empty_directory(tmp_path):
    assert dataio.load_frames(str(tmp_path)).shape[0] == 0


def test_malformed_and_mismatched(tmp_path):
    (tmp_path / "frame_00000.ppm").write_bytes(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(DataError, match="frame_00000"):
        dataio.load_frames(str(tmp_path))
    d = tmp_path / "mix"
    dataio.write_pnm(d.mkdir() or d / "a.ppm", np.zeros((2, 2, 3), np.uint8))
    dataio.write_pnm(d / "b.ppm", np.zeros((2, 3, 3), np.uint8))
    with pytest.raises(DataError, match="b.ppm"):
        dataio.load_frames(str(d))
    (tmp_path / "x.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(DataError, match="P3"):
        dataio.read_pnm(tmp_path / "x.ppm")
    with pytest.raises(DataError):
        dataio.load_frames(str(tmp_path / "missing"))


def test_raw_manifest(tmp_path):
    x = torch.randint(0, 256, (2, 3, 4, 6), dtype=torch.uint8)
    m = tmp_path / "clip.manifest"
    dataio.write_raw(x, str(m))
    assert torch.equal(dataio.load_frames(str(m)), x)
    m.write_text("width=6\nheight=4\nframes=3\ndata=clip.rgb\n")
    with pytest.raises(DataError, match="bytes"):
        dataio.load_frames(str(m))
    m.write_text("width=6\n")
    with pytest.raises(DataError, match="height"):
        dataio.load_frames(str(m))


def test_downscale_then_crop():
    x = torch.zeros(8, 3, 720, 1280)
    y = dataio.downscale_shortest(x, 256)
    assert y.shape[-2:] == (256, 455)
    chunks = dataio.preprocess(x, crop="center", crop_size=160, downscale=256)
    assert chunks.shape == (1, 8, 3, 160, 160)


def test_crop_none_identity():
    x = torch.randint(0, 256, (16, 3, 160, 160)).float()
    out = dataio.preprocess(x, crop="none")
    assert out.shape == (2, 8, 3, 160, 160)
    assert torch.equal(out.reshape(16, 3, 160, 160), x)


def test_random_crop_reproducible():
    x = torch.rand(24, 3, 64, 80) * 255
    a = dataio.preprocess(x, crop="random", crop_size=32, seed=5)
    b = dataio.preprocess(x, crop="random", crop_size=32, seed=5)
    c = dataio.preprocess(x, crop="random", crop_size=32, seed=6)
    assert torch.equal(a, b) and not torch.equal(a, c)


def test_crop_errors_and_remainder():
    with pytest.raises(DataError, match="smaller"):
        dataio.preprocess(torch.zeros(8, 3, 100, 200))
    with pytest.raises(DataError, match="divisible"):
        dataio.preprocess(torch.zeros(8, 3, 200, 200), crop_size=100)
    x = torch.arange(10).float().reshape(10, 1, 1, 1).expand(10, 1, 8, 8)
    assert dataio.preprocess(x, crop="none").shape[0] == 1
    padded = dataio.preprocess(x, crop="none", drop_remainder=False)
    assert padded.shape[0] == 2 and padded[1, -1, 0, 0, 0] == 9


def test_masks_follow_crops():
    x = torch.rand(8, 3, 64, 64) * 255
    m = torch.zeros(8, 1, 64, 64)
    m[..., :32, :] = 1
    cx, cm = dataio.preprocess(x, crop="random", crop_size=32, seed=1, masks=m)
    ref = dataio.preprocess(torch.cat([x, m * 1000], 1), crop="random", crop_size=32, seed=1)
    assert torch.equal(cm, ref[:, :, 3:] / 1000)
    assert torch.equal(cx, ref[:, :, :3])


def test_stack_modalities():
    srcs = [torch.full((8, 3, 16, 16), i, dtype=torch.uint8) for i in range(4)]
    out = dataio.stack_modalities(srcs)
    assert out.shape == (8, 12, 16, 16)
    assert [int(out[0, 3 * i, 0, 0]) for i in range(4)] == [0, 1, 2, 3]
    one = torch.randint(0, 256, (8, 3, 16, 16), dtype=torch.uint8)
    for part in dataio.unstack_modalities(dataio.stack_modalities([one] * 4)):
        assert torch.equal(part, one)
    with pytest.raises(DataError):
        dataio.stack_modalities([srcs[0], srcs[1][:4]])


def test_masks(tmp_path):
    zero = tmp_path / "zero"
    dataio.write_masks(torch.zeros(2, 1, 4, 4), zero)
    assert torch.equal(dataio.load_masks(str(zero)), torch.zeros(2, 1, 4, 4))
    checker = (torch.arange(16).reshape(4, 4) + torch.arange(4)[:, None]) % 2
    cm = tmp_path / "checker"
    dataio.write_masks(checker[None, None].float(), cm)
    assert torch.equal(dataio.load_masks(str(cm), (4, 4))[0, 0], checker.float())
    with pytest.raises(DataError, match="frames are"):
        dataio.load_masks(str(cm), (8, 8))
    bad = tmp_path / "bad"
    bad.mkdir()
    dataio.write_pnm(bad / "frame_00000.pgm", np.full((2, 2), 7, np.uint8))
    with pytest.raises(DataError, match="non-binary"):
        dataio.load_masks(str(bad))


def test_load_dataset_with_masks(tmp_path):
    root, mroot = tmp_path / "clips", tmp_path / "masks"
    for i in range(2):
        dataio.write_frames(torch.randint(0, 256, (8, 3, 16, 16), dtype=torch.uint8), root / f"c{i}")
        dataio.write_masks(torch.ones(8, 1, 16, 16), mroot / f"c{i}")
    data, masks = dataio.load_dataset(str(root), str(mroot), crop="none")
    assert data.shape == (2, 8, 3, 16, 16) and masks.shape == (2, 8, 1, 16, 16)
    with pytest.raises(DataError):
        dataio.load_dataset(str(tmp_path / "nothing"))
