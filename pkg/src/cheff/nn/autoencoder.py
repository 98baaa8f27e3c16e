"""KL-regularized convolutional autoencoder (encoder E, decoder D)."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from cheff import tensor as T
from cheff.errors import ShapeError
from cheff.nn.layers import Conv2d, Downsample, GroupNorm, ResBlock, Upsample
from cheff.optim import ParamSet
from cheff.rng import RngState
from cheff.tensor import Tensor

LOGVAR_RANGE = (-30.0, 20.0)


@dataclass
class AutoencoderSpec:
    in_channels: int = 1
    channels: tuple[int, ...] = (32, 64, 128)
    latent_channels: int = 3
    downsample_factor: int = 4
    res_layers: int = 1
    kl_weight: float = 1e-6
    norm_groups: int = 8

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if not self.channels or min(self.channels) < 1 or self.latent_channels < 1:
            raise ValueError("autoencoder widths must be positive")
        if 2 ** (len(self.channels) - 1) != self.downsample_factor:
            raise ValueError(f"{len(self.channels)} channel levels give downsampling "
                             f"{2 ** (len(self.channels) - 1)}, not {self.downsample_factor}")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be non-negative")

    def latent_shape(self, h: int, w: int) -> tuple[int, int, int]:
        f = self.downsample_factor
        if h % f or w % f:
            raise ShapeError(f"input {h}x{w} not divisible by downsample factor {f}")
        return (self.latent_channels, h // f, w // f)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


@dataclass
class Posterior:
    mu: Tensor
    logvar: Tensor

    def sample(self, eps) -> Tensor:
        """z = mu + exp(logvar / 2) * eps."""
        return self.mu + T.exp(self.logvar * 0.5) * T.as_tensor(eps, like=self.mu)

    def kl(self) -> Tensor:
        """Elementwise KL(N(mu, e^logvar) || N(0, 1))."""
        return (self.mu * self.mu + T.exp(self.logvar) - 1.0 - self.logvar) * 0.5


class Autoencoder:
    def __init__(self, spec: AutoencoderSpec, rng: RngState | int = 0, dtype=np.float32):
        if not isinstance(rng, RngState):
            rng = RngState(rng)
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.params = p = ParamSet()
        chs, g = spec.channels, spec.norm_groups

        self.enc_in = Conv2d(p, "enc.conv_in", spec.in_channels, chs[0], rng, dtype=dtype)
        self.enc_levels = []
        ch = chs[0]
        for i, out_ch in enumerate(chs):
            blocks = []
            for j in range(spec.res_layers):
                blocks.append(ResBlock(p, f"enc.{i}.res.{j}", ch, out_ch, rng, None, g, dtype))
                ch = out_ch
            ds = Downsample(p, f"enc.{i}.down", ch, rng, dtype) if i < len(chs) - 1 else None
            self.enc_levels.append((blocks, ds))
        self.enc_mid = ResBlock(p, "enc.mid", ch, ch, rng, None, g, dtype)
        self.enc_norm = GroupNorm(p, "enc.norm_out", ch, g, dtype)
        self.enc_out = Conv2d(p, "enc.conv_out", ch, 2 * spec.latent_channels, rng, dtype=dtype)

        self.dec_in = Conv2d(p, "dec.conv_in", spec.latent_channels, ch, rng, dtype=dtype)
        self.dec_mid = ResBlock(p, "dec.mid", ch, ch, rng, None, g, dtype)
        self.dec_levels = []
        for i in reversed(range(len(chs))):
            blocks = []
            for j in range(spec.res_layers):
                blocks.append(ResBlock(p, f"dec.{i}.res.{j}", ch, chs[i], rng, None, g, dtype))
                ch = chs[i]
            us = Upsample(p, f"dec.{i}.up", ch, rng, dtype) if i > 0 else None
            self.dec_levels.append((blocks, us))
        self.dec_norm = GroupNorm(p, "dec.norm_out", ch, g, dtype)
        self.dec_out = Conv2d(p, "dec.conv_out", ch, spec.in_channels, rng, dtype=dtype)

    def encode(self, x) -> Posterior:
        x = T.as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"encoder expects [N,{self.spec.in_channels},H,W], got {x.shape}")
        self.spec.latent_shape(x.shape[2], x.shape[3])
        h = self.enc_in(x)
        for blocks, ds in self.enc_levels:
            for rb in blocks:
                h = rb(h)
            if ds is not None:
                h = ds(h)
        h = self.enc_out(T.silu(self.enc_norm(self.enc_mid(h))))
        c = self.spec.latent_channels
        return Posterior(h[:, :c], T.clip(h[:, c:], *LOGVAR_RANGE))

    def decode(self, z) -> Tensor:
        z = T.as_tensor(z)
        if z.ndim != 4 or z.shape[1] != self.spec.latent_channels:
            raise ShapeError(f"decoder expects [N,{self.spec.latent_channels},h,w], got {z.shape}")
        h = self.dec_mid(self.dec_in(z))
        for blocks, us in self.dec_levels:
            for rb in blocks:
                h = rb(h)
            if us is not None:
                h = us(h)
        return self.dec_out(T.silu(self.dec_norm(h)))


def ae_loss(model, x, rng: RngState | None = None, eps=None, kl_weight: float | None = None) -> Tensor:
    """Pixel MSE of D(z), z drawn from E's posterior, plus weighted mean KL.

    ``model`` only needs ``encode(x) -> Posterior`` and ``decode(z)``.
    """
    x = T.as_tensor(x)
    post = model.encode(x)
    if eps is None:
        eps = rng.normal(post.mu.shape, dtype=post.mu.dtype)
    z = post.sample(eps)
    rec = model.decode(z)
    if rec.shape != x.shape:
        raise ShapeError(f"reconstruction {rec.shape} != input {x.shape}")
    if kl_weight is None:
        kl_weight = model.spec.kl_weight
    diff = rec - x
    return T.mean(diff * diff) + T.mean(post.kl()) * kl_weight
