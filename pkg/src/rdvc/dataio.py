"""Frame and mask ingestion, preprocessing and export.

Supported lossless sources:

* a directory of binary PPM (P6) frames, sorted by file name;
* a raw planar file described by a small key=value manifest
  (``width``, ``height``, ``frames``, ``channels``, ``data``).

Masks are binary PGM (P5) files with values 0 (background) or 255
(foreground), one per frame, using the same naming as the frames.
"""
from __future__ import annotations

import os
import re
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

FRAME_EXTS = (".ppm", ".pnm")
MASK_EXTS = (".pgm", ".pnm")
CHUNK_T = 8


class DataError(ValueError):
    pass


# -- portable any-map -----------------------------------------------------
_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_pnm(path):
    """``H x W x C`` uint8 array from a binary P5/P6 file (maxval 255)."""
    with open(path, "rb") as f:
        data = f.read()
    fields, pos = [], 0
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise DataError(f"{path}: malformed header")
        fields.append(m.group(1))
        pos = m.end()
    magic, w, h, maxval = fields
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: unsupported format {magic!r} (need binary P5/P6)")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise DataError(f"{path}: malformed header") from None
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit files are supported (maxval {maxval})")
    c = 3 if magic == b"P6" else 1
    pos += 1  # single whitespace byte after maxval
    body = data[pos:]
    if len(body) != w * h * c:
        raise DataError(f"{path}: expected {w * h * c} pixel bytes, found {len(body)}")
    return np.frombuffer(body, np.uint8).reshape(h, w, c).copy()


def write_pnm(path, image):
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise DataError(f"can only write uint8 images, got {image.dtype}")
    if image.ndim == 2:
        image = image[..., None]
    h, w, c = image.shape
    if c not in (1, 3):
        raise DataError(f"PNM images need 1 or 3 channels, got {c}")
    magic = b"P6" if c == 3 else b"P5"
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(image).tobytes())


# -- frames ---------------------------------------------------------------
def _listing(directory, exts):
    return sorted(n for n in os.listdir(directory) if n.lower().endswith(exts))


def read_manifest(path):
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    for key in ("width", "height", "frames"):
        if key not in out:
            raise DataError(f"{path}: manifest is missing {key!r}")
    return out


def _load_raw(manifest_path):
    m = read_manifest(manifest_path)
    w, h, t = int(m["width"]), int(m["height"]), int(m["frames"])
    c = int(m.get("channels", 3))
    data = m.get("data", os.path.splitext(os.path.basename(manifest_path))[0] + ".rgb")
    data = os.path.join(os.path.dirname(manifest_path), data)
    raw = np.fromfile(data, dtype=np.uint8)
    if raw.size != t * c * h * w:
        raise DataError(f"{data}: expected {t * c * h * w} bytes for {t}x{c}x{h}x{w}, found {raw.size}")
    return torch.from_numpy(raw.reshape(t, c, h, w))


def load_frames(source):
    """``T x C x H x W`` uint8 tensor from a frame directory or raw manifest."""
    if os.path.isdir(source):
        names = _listing(source, FRAME_EXTS)
        frames = []
        for name in names:
            img = read_pnm(os.path.join(source, name))
            if frames and img.shape != frames[0].shape:
                raise DataError(
                    f"frame {name} is {img.shape[1]}x{img.shape[0]}, expected "
                    f"{frames[0].shape[1]}x{frames[0].shape[0]}"
                )
            frames.append(img)
        if not frames:
            return torch.zeros(0, 3, 0, 0, dtype=torch.uint8)
        return torch.from_numpy(np.stack(frames)).permute(0, 3, 1, 2).contiguous()
    if os.path.isfile(source):
        return _load_raw(source)
    raise DataError(f"no frame source at {source}")


def _u8(frames):
    x = torch.as_tensor(frames)
    if x.dtype != torch.uint8:
        x = torch.round(x.float().clamp(0, 255)).to(torch.uint8)
    return x


def write_frames(frames, directory, prefix="frame"):
    """One PPM (3 channels) or PGM (1 channel) per frame; returns the file paths."""
    x = _u8(frames)
    os.makedirs(directory, exist_ok=True)
    ext = ".ppm" if x.shape[1] == 3 else ".pgm"
    paths = []
    for i, frame in enumerate(x):
        p = os.path.join(directory, f"{prefix}_{i:05d}{ext}")
        write_pnm(p, frame.permute(1, 2, 0).numpy())
        paths.append(p)
    return paths


def write_raw(frames, manifest_path):
    x = _u8(frames)
    t, c, h, w = x.shape
    data = os.path.splitext(os.path.basename(manifest_path))[0] + ".rgb"
    x.numpy().tofile(os.path.join(os.path.dirname(manifest_path) or ".", data))
    with open(manifest_path, "w") as f:
        f.write(f"width={w}\nheight={h}\nframes={t}\nchannels={c}\ndata={data}\n")


# -- masks ----------------------------------------------------------------
def load_masks(source, frame_dims: Optional[Sequence[int]] = None):
    """``T x 1 x H x W`` float mask in {0, 1} from a directory of PGM files."""
    if not os.path.isdir(source):
        raise DataError(f"no mask directory at {source}")
    masks = []
    for name in _listing(source, MASK_EXTS):
        img = read_pnm(os.path.join(source, name))
        if img.shape[2] != 1:
            raise DataError(f"mask {name} must be a single-channel graymap")
        bad = (img != 0) & (img != 255)
        if bad.any():
            raise DataError(f"mask {name} has non-binary values (only 0 and 255 allowed)")
        if frame_dims is not None and img.shape[:2] != tuple(frame_dims):
            raise DataError(f"mask {name} is {img.shape[0]}x{img.shape[1]}, frames are {tuple(frame_dims)}")
        masks.append(img[..., 0] == 255)
    if not masks:
        return torch.zeros(0, 1, *(frame_dims or (0, 0)))
    return torch.from_numpy(np.stack(masks)[:, None].astype(np.float32))


def write_masks(masks, directory, prefix="frame"):
    m = torch.as_tensor(masks)
    return write_frames((m > 0.5).to(torch.uint8) * 255, directory, prefix)


# -- preprocessing --------------------------------------------------------
def downscale_shortest(frames, target):
    """Bilinear resize (half-pixel centers) so the shorter side equals ``target``."""
    x = torch.as_tensor(frames).float()
    h, w = x.shape[-2:]
    if min(h, w) == target:
        return x
    scale = target / min(h, w)
    size = (target, int(round(w * scale))) if h <= w else (int(round(h * scale)), target)
    y = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    return torch.round(y.clamp(0, 255))


def crop_offsets(h, w, size, mode, rng=None):
    if mode == "none":
        return 0, 0
    if h < size or w < size:
        raise DataError(f"frame {h}x{w} is smaller than the {size}x{size} crop")
    if mode == "center":
        return (h - size) // 2, (w - size) // 2
    if mode == "random":
        rng = rng if rng is not None else np.random.default_rng()
        return int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))
    raise DataError(f"unknown crop mode {mode!r}")


def preprocess(frames, crop="center", crop_size=160, downscale=None, chunk_T=CHUNK_T, seed=None,
               masks=None, drop_remainder=True):
    """Chunks ``N x chunk_T x C x H x W`` (float, 0..255).

    Random crops are drawn per chunk from ``seed``.  When ``masks`` is given
    they receive the same downscale and crops and ``(chunks, mask_chunks)``
    is returned.  Incomplete trailing chunks are dropped unless
    ``drop_remainder`` is false, in which case the last frame is repeated.
    """
    if crop != "none" and crop_size % 8:
        raise DataError(f"crop size must be divisible by 8, got {crop_size}")
    x = torch.as_tensor(frames).float()
    m = None if masks is None else torch.as_tensor(masks).float()
    if m is not None and (m.shape[0] != x.shape[0] or m.shape[-2:] != x.shape[-2:]):
        raise DataError(f"masks {tuple(m.shape)} not aligned with frames {tuple(x.shape)}")
    if downscale is not None:
        x = downscale_shortest(x, downscale)
        if m is not None:
            m = (downscale_shortest(m * 255, downscale) >= 128).float()
    T = x.shape[0]
    n = T // chunk_T if drop_remainder else -(-T // chunk_T)
    if not drop_remainder and n * chunk_T > T:
        pad = n * chunk_T - T
        x = torch.cat([x, x[-1:].expand(pad, *x.shape[1:])])
        if m is not None:
            m = torch.cat([m, m[-1:].expand(pad, *m.shape[1:])])
    rng = np.random.default_rng(seed)
    chunks, mchunks = [], []
    h, w = x.shape[-2:]
    for i in range(n):
        top, left = crop_offsets(h, w, crop_size, crop, rng)
        sz_h, sz_w = (h, w) if crop == "none" else (crop_size, crop_size)
        sl = (slice(i * chunk_T, (i + 1) * chunk_T), slice(None), slice(top, top + sz_h), slice(left, left + sz_w))
        chunks.append(x[sl])
        if m is not None:
            mchunks.append(m[sl])
    out = torch.stack(chunks) if chunks else x.new_zeros(0, chunk_T, x.shape[1], crop_size, crop_size)
    if m is None:
        return out
    mout = torch.stack(mchunks) if mchunks else out.new_zeros(0, chunk_T, 1, *out.shape[-2:])
    return out, mout


def stack_modalities(sources):
    """Channel-wise concatenation of aligned streams, in source order."""
    xs = [torch.as_tensor(s) for s in sources]
    if not xs:
        raise DataError("no sources to stack")
    ref = xs[0]
    for i, s in enumerate(xs[1:], 1):
        if s.shape[0] != ref.shape[0] or s.shape[-2:] != ref.shape[-2:]:
            raise DataError(f"source {i} has shape {tuple(s.shape)}, source 0 has {tuple(ref.shape)}")
    return torch.cat(xs, dim=-3)


def unstack_modalities(frames, channels=3):
    x = torch.as_tensor(frames)
    if x.shape[-3] % channels:
        raise DataError(f"{x.shape[-3]} channels do not split into groups of {channels}")
    return list(torch.split(x, channels, dim=-3))


def list_sources(root):
    """Clip sources under ``root``: the directory itself if it holds frames,
    otherwise every sub-directory with frames and every ``*.manifest`` file."""
    if os.path.isfile(root):
        return [root]
    if not os.path.isdir(root):
        raise DataError(f"no dataset at {root}")
    if _listing(root, FRAME_EXTS):
        return [root]
    out = []
    for name in sorted(os.listdir(root)):
        p = os.path.join(root, name)
        if os.path.isdir(p) and _listing(p, FRAME_EXTS):
            out.append(p)
        elif name.endswith(".manifest"):
            out.append(p)
    return out


def load_dataset(root, masks_root=None, crop="center", crop_size=160, downscale=None, chunk_T=CHUNK_T,
                 seed=None):
    """Chunks from every clip under ``root``; masks mirror the clip layout under ``masks_root``."""
    sources = list_sources(root)
    if not sources:
        raise DataError(f"no clips found under {root}")
    rng = np.random.default_rng(seed)
    chunks, mchunks = [], []
    for src in sources:
        frames = load_frames(src)
        masks = None
        if masks_root is not None:
            rel = os.path.relpath(src, root)
            mdir = masks_root if rel == "." else os.path.join(masks_root, os.path.splitext(rel)[0])
            masks = load_masks(mdir, tuple(frames.shape[-2:]))
            if len(masks) != len(frames):
                raise DataError(f"{mdir}: {len(masks)} masks for {len(frames)} frames")
        out = preprocess(frames, crop, crop_size, downscale, chunk_T, int(rng.integers(2**31)), masks)
        if masks is not None:
            out, m = out
            mchunks.append(m)
        chunks.append(out)
    data = torch.cat(chunks)
    return (data, torch.cat(mchunks)) if masks_root is not None else data
