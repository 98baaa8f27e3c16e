from cheff.nn.autoencoder import Autoencoder, AutoencoderSpec, Posterior, ae_loss
from cheff.nn.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from cheff.nn.layers import cross_attention, sinusoidal_embedding
from cheff.nn.text import TextEncoder, TextEncoderSpec, text_encode
from cheff.nn.unet import CrossAttnConfig, UNet, UNetConfig

__all__ = [
    "Autoencoder", "AutoencoderSpec", "Posterior", "ae_loss",
    "Checkpoint", "load_checkpoint", "save_checkpoint",
    "cross_attention", "sinusoidal_embedding",
    "TextEncoder", "TextEncoderSpec", "text_encode",
    "CrossAttnConfig", "UNet", "UNetConfig",
]
