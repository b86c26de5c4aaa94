"""rdvc: a learned lossy video codec.

A 2D/3D convolutional autoencoder with a learned scalar codebook, a gated
PixelCNN prior over the discrete latents and a range coder that turns the
prior's PMFs into a bitstream.
"""
from .codec import decode_video, encode_video
from .estimator import VideoCodec
from .model import ModelConfig, RDVideoModel, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "RDVideoModel", "VideoCodec", "decode_video", "encode_video", "load_checkpoint",
    "save_checkpoint",
]
