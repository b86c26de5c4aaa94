"""Rate-distortion evaluation: RD points, RD curves and foreground/background reports."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch

from .codec import decode_video, encode_latents, encode_video, proxy_bits, reconstruct_chunks
from .losses import ms_ssim, semantic_ms_ssim

CSV_FIELDS = ("dataset", "model", "beta", "bpp_proxy", "bpp_actual", "ms_ssim", "fg_ms_ssim", "bg_ms_ssim")


@dataclass
class RDPoint:
    dataset: str
    model: str
    beta: Optional[float]
    bpp_proxy: float
    bpp_actual: float
    ms_ssim: float
    fg_ms_ssim: Optional[float] = None
    bg_ms_ssim: Optional[float] = None
    bpp_actual_with_header: Optional[float] = None

    def row(self):
        d = asdict(self)
        return [("" if d[k] is None else d[k]) for k in CSV_FIELDS]


def _chunks(dataset):
    x = torch.as_tensor(dataset).float()
    if x.dim() == 4:
        x = x[None]
    if x.dim() != 5:
        raise ValueError(f"expected N x T x C x H x W chunks, got shape {tuple(x.shape)}")
    return x


def reconstruction_score(x, x_hat, scales=5):
    """MS-SSIM of a reconstruction, computed in float64."""
    return float(ms_ssim(torch.as_tensor(x).double(), torch.as_tensor(x_hat).double(), scales=scales))


def rd_point(model, dataset, model_id="model", beta=None, dataset_id="data", masks=None, code=True, scales=5):
    """Average RD measurements over every chunk of ``dataset``.

    With ``code=True`` every chunk goes through the real encoder and decoder
    and ``bpp_actual`` counts the coded streams; otherwise the reconstruction
    comes from the (bitwise identical) local path and ``bpp_actual`` is NaN.
    """
    x = _chunks(dataset)
    T, H, W = x.shape[1], x.shape[3], x.shape[4]
    pixels = T * H * W
    proxy, actual, total, scores, fgs, bgs = [], [], [], [], [], []
    for i, chunk in enumerate(x):
        codes = encode_latents(model, chunk[None])
        proxy.append(proxy_bits(model, codes) / pixels)
        if code:
            enc = encode_video(chunk, model, chunk_T=T)
            recon = decode_video(enc.to_bytes(), model)
            actual.append(8 * sum(len(s) for s in enc.streams) / pixels)
            total.append(8 * enc.nbytes / pixels)
        else:
            recon = reconstruct_chunks(model, codes, T)
        recon = recon.double()
        scores.append(reconstruction_score(chunk, recon, scales))
        if masks is not None:
            m = torch.as_tensor(masks[i]).double()
            fg, bg, _ = semantic_ms_ssim(chunk.double(), recon, m, scales=scales)
            fgs.append(float(fg))
            bgs.append(float(bg))
    mean = lambda v: float(np.mean(v)) if v else math.nan
    return RDPoint(
        dataset=dataset_id, model=model_id, beta=beta, bpp_proxy=mean(proxy), bpp_actual=mean(actual),
        ms_ssim=mean(scores), fg_ms_ssim=mean(fgs) if masks is not None else None,
        bg_ms_ssim=mean(bgs) if masks is not None else None,
        bpp_actual_with_header=mean(total) if code else None,
    )


def write_csv(points, path=None):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for p in points:
        w.writerow(p.row())
    text = buf.getvalue()
    if path:
        with open(path, "w", newline="") as f:
            f.write(text)
    return text


def rd_curve(models, dataset, dataset_id="data", csv_path=None, masks=None, code=True, scales=5):
    """RD points for ``models`` (``(model_id, model, beta)`` triples), sorted by proxy bpp."""
    if len(models) < 2:
        raise ValueError("an RD curve needs at least two models")
    points = [rd_point(m, dataset, mid, beta, dataset_id, masks, code, scales) for mid, m, beta in models]
    points.sort(key=lambda p: (p.bpp_proxy, p.model))
    write_csv(points, csv_path)
    return points


def rd_violations(points):
    """Adjacent pairs along a bpp-sorted curve where MS-SSIM drops as bpp grows."""
    return [(a, b) for a, b in zip(points, points[1:]) if b.ms_ssim < a.ms_ssim]


def fg_bg_report(model, dataset, masks, model_id="model", scales=5):
    """Per-chunk foreground/background MS-SSIM of the model's reconstructions."""
    x = _chunks(dataset)
    rows = []
    for i, chunk in enumerate(x):
        codes = encode_latents(model, chunk[None])
        recon = reconstruct_chunks(model, codes, chunk.shape[0]).double()
        fg, bg, _ = semantic_ms_ssim(chunk.double(), recon, torch.as_tensor(masks[i]).double(), scales=scales)
        rows.append(dict(model=model_id, chunk=i, ms_ssim=reconstruction_score(chunk, recon, scales),
                         fg_ms_ssim=float(fg), bg_ms_ssim=float(bg)))
    return rows
