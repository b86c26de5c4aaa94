"""Training, fine-tuning and semantic training of the rate-distortion model."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import torch

from .losses import semantic_total_loss, total_loss
from .model import ModelConfig, RDVideoModel, load_checkpoint, save_checkpoint
from .nncore import AdamState, BatchNorm, adam_step

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "distortion", "rate_bpp", "total", "lr")
GROUPS = ("autoencoder", "codebook", "prior")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    beta: float = 0.1
    batch_size: int = 32
    lr: float = 1e-4
    lr_decay: float = 0.1
    decay_every: int = 40
    decay_unit: str = "epoch"
    epochs: int = 100
    max_steps: Optional[int] = None
    semantic: bool = False
    alpha: float = 0.95
    rho_fg: Optional[float] = None
    rho_bg: Optional[float] = None
    seed: int = 0
    clip_norm: float = 5.0
    bn_freeze_fraction: float = 0.05
    ms_ssim_scales: int = 5
    frozen: Sequence[str] = field(default_factory=tuple)
    log_every: int = 1
    metrics_path: Optional[str] = None
    checkpoint_dir: Optional[str] = None

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.decay_unit not in ("epoch", "step"):
            raise ValueError(f"decay_unit must be 'epoch' or 'step', got {self.decay_unit!r}")
        if self.batch_size < 1 or self.decay_every < 1:
            raise ValueError("batch_size and decay_every must be >= 1")
        unknown = set(self.frozen) - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}; choose from {GROUPS}")
        self.frozen = tuple(self.frozen)


# Kinetics-scale schedule: 10 epochs, decay every 4
KINETICS_PRESET = dict(epochs=10, decay_every=4, decay_unit="epoch", batch_size=32, lr=1e-4)


def learning_rate(cfg: TrainConfig, epoch, step):
    unit = epoch if cfg.decay_unit == "epoch" else step
    return cfg.lr * cfg.lr_decay ** (unit // cfg.decay_every)


@dataclass
class TrainResult:
    model: RDVideoModel
    steps: int
    history: list
    checkpoint: Optional[str] = None


def _trainable(model, cfg):
    frozen = set(cfg.frozen)
    if cfg.beta == 0:
        # without a rate term the prior has nothing to learn
        frozen.add("prior")
    out = []
    for name, p in model.named_parameters():
        if name.split(".", 1)[0] in frozen:
            p.requires_grad_(False)
        else:
            p.requires_grad_(True)
            out.append((name, p))
    return out


def _batches(n, batch_size, gen):
    order = torch.randperm(n, generator=gen).tolist()
    return [order[i: i + batch_size] for i in range(0, n, batch_size)]


def compute_loss(model, x, cfg: TrainConfig, mask=None):
    out = model(x)
    kw = dict(scales=cfg.ms_ssim_scales)
    if cfg.semantic:
        if mask is None:
            raise ValueError("semantic training needs masks aligned with the data")
        return semantic_total_loss(
            x, out.x_hat, out.q, out.log_pmfs, cfg.beta, mask, cfg.alpha, cfg.rho_fg, cfg.rho_bg, **kw
        )
    return total_loss(x, out.x_hat, out.q, out.log_pmfs, cfg.beta, **kw)


def _dump(model, cfg, step, losses):
    if not cfg.checkpoint_dir:
        return None
    path = os.path.join(cfg.checkpoint_dir, "diverged")
    # the weights may hold non-finite values; keep them for inspection
    torch.save({"state": model.state_dict(), "step": step, "losses": losses}, path + ".pt")
    return path + ".pt"


def train(model, data, cfg: TrainConfig, masks=None, step0=0):
    """Train ``model`` (an :class:`RDVideoModel` or a :class:`ModelConfig`) on chunks.

    ``data`` is ``N x T x C x H x W`` (0..255); ``masks`` is ``N x T x 1 x H x W``
    for semantic training.
    """
    if isinstance(model, ModelConfig):
        torch.manual_seed(cfg.seed)
        model = RDVideoModel(model)
    data = torch.as_tensor(data).float()
    if data.dim() != 5 or len(data) == 0:
        raise ValueError(f"expected a non-empty N x T x C x H x W dataset, got {tuple(data.shape)}")
    if masks is not None:
        masks = torch.as_tensor(masks).float()
        if masks.shape[:2] != data.shape[:2] or masks.shape[-2:] != data.shape[-2:]:
            raise ValueError(f"masks {tuple(masks.shape)} not aligned with data {tuple(data.shape)}")
    params = _trainable(model, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    per_epoch = math.ceil(len(data) / cfg.batch_size)
    total_steps = cfg.epochs * per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    freeze_at = int(math.ceil(total_steps * (1 - cfg.bn_freeze_fraction)))
    state = AdamState(lr=cfg.lr)
    history, best = [], (math.inf, None)
    writer = None
    if cfg.metrics_path:
        os.makedirs(os.path.dirname(os.path.abspath(cfg.metrics_path)), exist_ok=True)
        new = not os.path.exists(cfg.metrics_path)
        fh = open(cfg.metrics_path, "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(METRIC_FIELDS)
    model.train()
    _set_bn_frozen(model, False, cfg.frozen)
    step = 0
    try:
        for epoch in range(cfg.epochs):
            if step >= total_steps:
                break
            epoch_totals = []
            for idx in _batches(len(data), cfg.batch_size, gen):
                if step >= total_steps:
                    break
                if step == freeze_at:
                    _set_bn_frozen(model, True, cfg.frozen)
                lr = learning_rate(cfg, epoch, step)
                state.lr = lr
                mask = masks[idx] if masks is not None else None
                loss = compute_loss(model, data[idx], cfg, mask)
                value = float(loss.total.detach())
                if not math.isfinite(value):
                    dump = _dump(model, cfg, step0 + step, loss.as_floats())
                    raise TrainingDiverged(f"non-finite loss at step {step0 + step} (state dump: {dump})")
                for _, p in params:
                    p.grad = None
                loss.total.backward()
                torch.nn.utils.clip_grad_norm_([p for _, p in params], cfg.clip_norm)
                adam_step(params, state)
                step += 1
                f = loss.as_floats()
                row = dict(step=step0 + step, distortion=f["distortion"], rate_bpp=f["rate_bpp"], total=value, lr=lr)
                history.append(row)
                epoch_totals.append(value)
                if writer and (step % cfg.log_every == 0 or step == total_steps):
                    writer.writerow([row[k] for k in METRIC_FIELDS])
                    fh.flush()
                if step % max(1, cfg.log_every) == 0:
                    log.debug("step %d total %.5f dist %.5f bpp %.4f", step, value, row["distortion"], row["rate_bpp"])
            mean_total = sum(epoch_totals) / max(1, len(epoch_totals))
            if cfg.checkpoint_dir and mean_total < best[0]:
                best = (mean_total, epoch)
                save_checkpoint(model, os.path.join(cfg.checkpoint_dir, "best"), step0 + step,
                                extra={"epoch": epoch, "mean_total": mean_total})
    finally:
        if writer:
            fh.close()
        for _, p in model.named_parameters():
            p.requires_grad_(True)
    model.eval()
    ckpt = None
    if cfg.checkpoint_dir:
        ckpt = save_checkpoint(model, os.path.join(cfg.checkpoint_dir, "final"), step0 + step,
                               extra={"train": _echo(cfg)})
    return TrainResult(model, step, history, ckpt)


def _echo(cfg):
    d = asdict(cfg)
    d["frozen"] = list(d["frozen"])
    return d


def _set_bn_frozen(model, frozen, keep=()):
    # submodules named in ``keep`` are frozen parameters; their statistics stay fixed too
    for name, m in model.named_modules():
        if isinstance(m, BatchNorm):
            m.frozen = frozen or name.split(".", 1)[0] in keep


def finetune(checkpoint, data, cfg: TrainConfig, masks=None, expect: Optional[ModelConfig] = None):
    """Continue training every parameter of a saved model on new data.

    The learning-rate schedule restarts from ``cfg``.  ``expect`` guards
    against fine-tuning the wrong architecture.
    """
    if isinstance(checkpoint, RDVideoModel):
        model, step0 = checkpoint, 0
    else:
        model, manifest = load_checkpoint(checkpoint)
        step0 = manifest.get("step", 0)
    if expect is not None and expect.to_dict() != model.cfg.to_dict():
        raise ValueError("checkpoint architecture does not match the requested configuration")
    return train(model, data, cfg, masks=masks, step0=step0)


def train_semantic(model, data, masks, cfg: TrainConfig):
    if masks is None:
        raise ValueError("semantic training needs masks")
    cfg = TrainConfig(**{**asdict(cfg), "semantic": True})
    return train(model, data, cfg, masks=masks)
