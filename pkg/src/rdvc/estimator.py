"""Scikit-learn style front end for the codec.

``VideoCodec`` wraps model construction, training and coding behind
``fit`` / ``transform`` / ``inverse_transform`` / ``predict`` / ``score``.
Inputs are video chunks ``N x T x C x H x W`` or a single clip
``T x C x H x W`` with values in 0..255.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .autoencoder import FRAME2D, VIDEO3D, AutoencoderConfig
from .codec import decode_video, encode_latents, encode_video, reconstruct_chunks
from .codemodel import FRAME_CONDITIONED, GRU_CONDITIONED, UNCONDITIONAL, PriorConfig
from .evalharness import reconstruction_score
from .model import ModelConfig, RDVideoModel, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, train

AE_MODES = {"2d": FRAME2D, "3d": VIDEO3D}
PRIORS = {"none": UNCONDITIONAL, "frame": FRAME_CONDITIONED, "gru": GRU_CONDITIONED}


def check_video(X, chunk_T=None, stride=8, channels=None, name="X"):
    """Validate and convert video input to a float32 ``N x T x C x H x W`` tensor."""
    x = torch.as_tensor(np.asarray(X) if not torch.is_tensor(X) else X)
    if x.dim() == 4:
        x = x[None]
    if x.dim() != 5:
        raise ValueError(f"{name} must be T x C x H x W or N x T x C x H x W, got shape {tuple(x.shape)}")
    if x.numel() == 0:
        raise ValueError(f"{name} is empty")
    x = x.to(torch.float32)
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")
    if x.min() < 0 or x.max() > 255:
        raise ValueError(f"{name} values must lie in 0..255")
    h, w = x.shape[-2:]
    if h % stride or w % stride:
        raise ValueError(f"{name} spatial size {h}x{w} must be divisible by {stride}")
    if channels is not None and x.shape[2] != channels:
        raise ValueError(f"{name} has {x.shape[2]} channels, expected {channels}")
    if chunk_T is not None and x.shape[1] != chunk_T:
        raise ValueError(f"{name} chunks have {x.shape[1]} frames, expected {chunk_T}")
    return x


class VideoCodec(TransformerMixin, BaseEstimator):
    """Learned video codec estimator.

    ``transform`` returns latent codes, ``inverse_transform`` decodes them to
    uint8 frames, ``predict`` is the round trip and ``score`` its MS-SSIM.
    """

    def __init__(self, ae="3d", prior="frame", input_channels=3, latent_channels=32, hidden_channels=128,
                 first_channels=64, residual_blocks=5, codebook_size=8, hidden_per_group=8,
                 gru_channels=64, beta=0.1, lr=1e-4, batch_size=32, epochs=100, max_steps=None,
                 decay_every=40, decay_unit="epoch", alpha=0.95, chunk_T=8, ms_ssim_scales=5, seed=0):
        self.ae = ae
        self.prior = prior
        self.input_channels = input_channels
        self.latent_channels = latent_channels
        self.hidden_channels = hidden_channels
        self.first_channels = first_channels
        self.residual_blocks = residual_blocks
        self.codebook_size = codebook_size
        self.hidden_per_group = hidden_per_group
        self.gru_channels = gru_channels
        self.beta = beta
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_steps = max_steps
        self.decay_every = decay_every
        self.decay_unit = decay_unit
        self.alpha = alpha
        self.chunk_T = chunk_T
        self.ms_ssim_scales = ms_ssim_scales
        self.seed = seed

    def model_config(self):
        if self.ae not in AE_MODES:
            raise ValueError(f"ae must be one of {sorted(AE_MODES)}, got {self.ae!r}")
        if self.prior not in PRIORS:
            raise ValueError(f"prior must be one of {sorted(PRIORS)}, got {self.prior!r}")
        return ModelConfig(
            AutoencoderConfig(
                mode=AE_MODES[self.ae], input_channels=self.input_channels,
                latent_channels=self.latent_channels, hidden_channels=self.hidden_channels,
                first_channels=self.first_channels, residual_blocks=self.residual_blocks,
            ),
            PriorConfig(
                variant=PRIORS[self.prior], latent_channels=self.latent_channels,
                codebook_size=self.codebook_size, hidden_per_group=self.hidden_per_group,
                gru_channels=self.gru_channels,
            ),
        )

    def train_config(self, semantic=False):
        return TrainConfig(
            beta=self.beta, lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
            max_steps=self.max_steps, decay_every=self.decay_every, decay_unit=self.decay_unit,
            alpha=self.alpha, semantic=semantic, seed=self.seed, ms_ssim_scales=self.ms_ssim_scales,
        )

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this VideoCodec is not fitted yet; call fit or load first")

    def fit(self, X, y=None, masks=None):
        """Train on chunks ``X``; ``masks`` (``N x T x 1 x H x W``) switches to semantic training."""
        x = check_video(X, self.chunk_T, channels=self.input_channels)
        cfg = self.model_config()
        result = train(cfg, x, self.train_config(semantic=masks is not None), masks=masks)
        self.model_ = result.model
        self.history_ = result.history
        self.n_steps_ = result.steps
        return self

    def _latent(self, X):
        self._check_fitted()
        x = check_video(X, self.chunk_T, channels=self.model_.cfg.ae.input_channels)
        return encode_latents(self.model_, x)

    def transform(self, X):
        """Latent codes ``N x T x K x H/8 x W/8`` (int64)."""
        return self._latent(X).numpy()

    def inverse_transform(self, codes):
        """uint8 frames ``N x T x C x H x W`` for latent codes."""
        self._check_fitted()
        codes = torch.as_tensor(np.asarray(codes), dtype=torch.int64)
        if codes.dim() != 5:
            raise ValueError(f"codes must be N x T x K x h x w, got shape {tuple(codes.shape)}")
        if codes.min() < 0 or codes.max() >= self.model_.cfg.codebook_size:
            raise ValueError("codes fall outside the codebook")
        n, t = codes.shape[:2]
        frames = reconstruct_chunks(self.model_, codes)
        return frames.reshape(n, t, *frames.shape[1:]).numpy()

    def predict(self, X):
        return self.inverse_transform(self.transform(X))

    def score(self, X, y=None):
        """Mean MS-SSIM between ``X`` and its reconstruction."""
        x = check_video(X, self.chunk_T)
        return reconstruction_score(x, torch.as_tensor(self.predict(x)), self.ms_ssim_scales)

    def encode(self, frames):
        """Container bytes for ``T x C x H x W`` frames of any length."""
        self._check_fitted()
        return encode_video(frames, self.model_, self.chunk_T).to_bytes()

    def decode(self, data):
        self._check_fitted()
        return decode_video(data, self.model_).numpy()

    def save(self, path):
        self._check_fitted()
        return save_checkpoint(self.model_, path, getattr(self, "n_steps_", 0),
                               extra={"estimator": self.get_params()})

    @classmethod
    def load(cls, path):
        model, manifest = load_checkpoint(path)
        params = manifest.get("extra", {}).get("estimator")
        est = cls(**params) if params else cls._from_model(model)
        est.model_ = model
        return est

    @classmethod
    def _from_model(cls, model):
        cfg = model.cfg
        ae = {v: k for k, v in AE_MODES.items()}[cfg.ae.mode]
        prior = {v: k for k, v in PRIORS.items()}[cfg.prior.variant]
        return cls(
            ae=ae, prior=prior, input_channels=cfg.ae.input_channels, latent_channels=cfg.latent_channels,
            hidden_channels=cfg.ae.hidden_channels, first_channels=cfg.ae.first_channels,
            residual_blocks=cfg.ae.residual_blocks, codebook_size=cfg.codebook_size,
            hidden_per_group=cfg.prior.hidden_per_group, gru_channels=cfg.prior.gru_channels,
        )

    @classmethod
    def from_model(cls, model: RDVideoModel, **params):
        est = cls._from_model(model).set_params(**params)
        est.model_ = model
        return est
