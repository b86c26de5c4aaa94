"""The full rate-distortion model and its on-disk checkpoint format.

A checkpoint is a directory with two files:

* ``manifest.json``: config echo, tensor table (name, shape, offset, count,
  trainable), training step and the model hash;
* ``params.f32``: every parameter and persistent buffer as little-endian
  float32, concatenated in table order.

The model hash is the first 8 bytes of SHA-256 over the canonical JSON of the
config and tensor table followed by the parameter bytes.  The codec writes it
into every stream and refuses to decode with a different model.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn

from .autoencoder import Autoencoder, AutoencoderConfig
from .codemodel import ExactPrior, GatedPixelCNNPrior, PriorConfig
from .quantizer import SOFT_TAU, Codebook, dequantize, quantize_hard, straight_through

MANIFEST = "manifest.json"
PARAMS = "params.f32"
FORMAT = "rdvc-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    ae: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    soft_tau: float = SOFT_TAU

    def __post_init__(self):
        if isinstance(self.ae, dict):
            self.ae = AutoencoderConfig(**self.ae)
        if isinstance(self.prior, dict):
            self.prior = PriorConfig(**self.prior)
        if self.prior.latent_channels != self.ae.latent_channels:
            raise ValueError(
                f"prior expects {self.prior.latent_channels} latent channels, "
                f"autoencoder produces {self.ae.latent_channels}"
            )

    @property
    def codebook_size(self):
        return self.prior.codebook_size

    @property
    def latent_channels(self):
        return self.ae.latent_channels

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class ForwardOutput(NamedTuple):
    z_tilde: torch.Tensor
    z_hat: torch.Tensor
    codes: torch.Tensor
    q: torch.Tensor
    x_hat: torch.Tensor
    log_pmfs: torch.Tensor


class RDVideoModel(nn.Module):
    """Encoder, codebook, decoder and autoregressive prior."""

    def __init__(self, cfg: Optional[ModelConfig] = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.autoencoder = Autoencoder(self.cfg.ae)
        self.codebook = Codebook(self.cfg.codebook_size)
        self.prior = GatedPixelCNNPrior(self.cfg.prior)

    def forward(self, x):
        """Training pass over ``B x T x C x H x W`` chunks."""
        z_tilde = self.autoencoder.encode_continuous(x)
        z_hat, q = straight_through(z_tilde, self.codebook.centers, self.cfg.soft_tau)
        codes = q.detach().argmax(-1)
        x_hat = self.autoencoder.decode(z_hat)
        log_pmfs = self.prior.forward_teacher_forced(q)
        return ForwardOutput(z_tilde, z_hat, codes, q, x_hat, log_pmfs)

    @torch.no_grad()
    def encode_codes(self, x):
        """Hard latent codes ``B x T x K x h x w`` (int64)."""
        return quantize_hard(self.autoencoder.encode_continuous(x), self.codebook.centers)

    @torch.no_grad()
    def reconstruct(self, codes):
        """Decoder output for integer codes, float, unclamped."""
        return self.autoencoder.decode(dequantize(torch.as_tensor(codes), self.codebook.centers))

    @torch.no_grad()
    def log_pmfs(self, codes):
        return self.prior.forward_teacher_forced(torch.as_tensor(codes))

    def exact_prior(self):
        return ExactPrior(self.prior)

    def model_hash(self):
        return model_hash(self)


def _tensor_table(model):
    trainable = {n for n, p in model.named_parameters()}
    table, arrays, offset = [], [], 0
    for name, t in model.state_dict().items():
        a = t.detach().cpu().numpy().astype("<f4").ravel()
        table.append(
            {"name": name, "shape": list(t.shape), "offset": offset, "count": int(a.size),
             "trainable": name in trainable}
        )
        arrays.append(a)
        offset += a.size
    flat = np.concatenate(arrays) if arrays else np.zeros(0, "<f4")
    return table, flat.tobytes()


def _hash(config, table, blob):
    head = json.dumps({"config": config, "tensors": table}, sort_keys=True).encode()
    return hashlib.sha256(head + blob).digest()[:8]


def model_hash(model):
    """8-byte identifier of the architecture and exact float32 weights."""
    table, blob = _tensor_table(model)
    return _hash(model.cfg.to_dict(), table, blob)


def save_checkpoint(model, path, step=0, extra=None):
    os.makedirs(path, exist_ok=True)
    table, blob = _tensor_table(model)
    config = model.cfg.to_dict()
    manifest = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "config": config,
        "tensors": table,
        "step": int(step),
        "hash": _hash(config, table, blob).hex(),
    }
    if extra:
        manifest["extra"] = extra
    with open(os.path.join(path, MANIFEST), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")
    with open(os.path.join(path, PARAMS), "wb") as f:
        f.write(blob)
    return path


def resolve_checkpoint(path):
    """A checkpoint directory, or a training output directory holding ``final/``."""
    if not os.path.isfile(os.path.join(path, MANIFEST)) and os.path.isfile(os.path.join(path, "final", MANIFEST)):
        return os.path.join(path, "final")
    return path


def read_manifest(path):
    path = resolve_checkpoint(path)
    mpath = os.path.join(path, MANIFEST)
    if not os.path.isfile(mpath):
        raise CheckpointError(f"no checkpoint manifest at {mpath}")
    with open(mpath) as f:
        manifest = json.load(f)
    if manifest.get("format") != FORMAT or manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{mpath}: unsupported checkpoint format")
    return manifest


def load_checkpoint(path):
    """Returns ``(model, manifest)``; the model is in eval mode."""
    path = resolve_checkpoint(path)
    manifest = read_manifest(path)
    model = RDVideoModel(ModelConfig.from_dict(manifest["config"]))
    with open(os.path.join(path, PARAMS), "rb") as f:
        blob = f.read()
    flat = np.frombuffer(blob, dtype="<f4")
    state = model.state_dict()
    names = [e["name"] for e in manifest["tensors"]]
    if names != list(state):
        missing = sorted(set(state) ^ set(names))
        raise CheckpointError(f"checkpoint tensors do not match the architecture: {missing[:5]}")
    total = sum(e["count"] for e in manifest["tensors"])
    if flat.size != total:
        raise CheckpointError(f"{PARAMS} holds {flat.size} values, manifest expects {total}")
    loaded = {}
    for e in manifest["tensors"]:
        a = flat[e["offset"]: e["offset"] + e["count"]].reshape(e["shape"])
        if tuple(a.shape) != tuple(state[e["name"]].shape):
            raise CheckpointError(f"shape mismatch for {e['name']}")
        loaded[e["name"]] = torch.from_numpy(a.copy())
    model.load_state_dict(loaded)
    model.eval()
    if model_hash(model).hex() != manifest["hash"]:
        raise CheckpointError(f"checkpoint {path} failed its hash check")
    return model, manifest
