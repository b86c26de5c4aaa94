import math

import pytest
import torch

from rdvc.autoencoder import AutoencoderConfig
from rdvc.codemodel import PriorConfig
from rdvc.evalharness import (CSV_FIELDS, RDPoint, fg_bg_report, rd_curve, rd_point, rd_violations,
                              reconstruction_score, write_csv)
from rdvc.model import ModelConfig, RDVideoModel, model_hash
from conftest import tiny_model


def clips(n=2, T=4, H=32, W=32, seed=0):
    return torch.randint(0, 256, (n, T, 3, H, W), generator=torch.Generator().manual_seed(seed)).float()


def test_identity_score():
    x = clips(1)[0]
    assert reconstruction_score(x, x, scales=3) == 1.0


def test_uniform_prior_point():
    torch.manual_seed(0)
    model = RDVideoModel(ModelConfig(AutoencoderConfig(hidden_channels=8, first_channels=8, residual_blocks=1),
                                     PriorConfig(hidden_per_group=1))).eval()
    x = clips(1, T=2, H=160, W=160)
    p = rd_point(model, x, "u", None, "d", scales=3)
    assert p.bpp_proxy == pytest.approx(1.5, abs=1e-6)
    T, H, W = 2, 160, 160
    slack = 0.02 * p.bpp_proxy + (p.bpp_actual_with_header - p.bpp_actual)
    assert -64 / (T * H * W) <= p.bpp_actual - p.bpp_proxy <= slack


def test_point_is_read_only_and_deterministic():
    model = tiny_model()
    h = model_hash(model)
    x = clips()
    a = rd_point(model, x, "m", 0.1, "d", scales=3)
    b = rd_point(model, x, "m", 0.1, "d", scales=3)
    assert a == b
    assert model_hash(model) == h
    assert all(math.isfinite(v) for v in (a.bpp_proxy, a.bpp_actual, a.ms_ssim))
    assert 0 <= a.ms_ssim <= 1


def test_local_path_point():
    p = rd_point(tiny_model(), clips(1), code=False, scales=3)
    assert math.isnan(p.bpp_actual) and p.bpp_actual_with_header is None


def test_curve_sorted_and_csv(tmp_path):
    m1, m2 = tiny_model(seed=0), tiny_model(seed=1)
    with torch.no_grad():
        m2.prior.head.bias.add_(torch.linspace(-1, 1, m2.prior.head.bias.numel()))
    path = tmp_path / "rd.csv"
    pts = rd_curve([("a", m1, 0.1), ("b", m2, 0.3), ("a2", m1, 0.1)], clips(1), "d", str(path), scales=3)
    assert len(pts) == 3
    assert [p.bpp_proxy for p in pts] == sorted(p.bpp_proxy for p in pts)
    dup = [p for p in pts if p.model in ("a", "a2")]
    assert dup[0].bpp_proxy == dup[1].bpp_proxy and dup[0].ms_ssim == dup[1].ms_ssim
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(CSV_FIELDS)
    assert len(lines) == 4
    with pytest.raises(ValueError):
        rd_curve([("a", m1, 0.1)], clips(1))


def test_violations_reported():
    pts = [RDPoint("d", "a", 0.7, 0.1, 0.1, 0.9), RDPoint("d", "b", 0.5, 0.2, 0.2, 0.85),
           RDPoint("d", "c", 0.3, 0.3, 0.3, 0.95)]
    bad = rd_violations(pts)
    assert len(bad) == 1 and bad[0][1].model == "b"
    assert write_csv(pts).splitlines()[1] == "d,a,0.7,0.1,0.1,0.9,,"


def test_fg_bg_report():
    model = tiny_model()
    x = clips(1)
    rows = fg_bg_report(model, x, torch.ones(1, 4, 1, 32, 32), scales=3)
    assert rows[0]["fg_ms_ssim"] == pytest.approx(rows[0]["ms_ssim"], abs=1e-9)
    assert rows[0]["bg_ms_ssim"] == 1.0
    p = rd_point(model, x, masks=torch.ones(1, 4, 1, 32, 32), scales=3)
    assert p.fg_ms_ssim == pytest.approx(p.ms_ssim, abs=1e-9)
