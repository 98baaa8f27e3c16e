"""Time-conditional U-net noise predictor."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from cheff import tensor as T
from cheff.diffusion import Conditioning
from cheff.errors import ShapeError
from cheff.nn.layers import (AttentionBlock, Conv2d, Downsample, GroupNorm, Linear, ResBlock,
                             Upsample, sinusoidal_embedding)
from cheff.optim import ParamSet
from cheff.rng import RngState
from cheff.tensor import Tensor


@dataclass
class CrossAttnConfig:
    d_tau: int
    heads: int = 1


@dataclass
class UNetConfig:
    in_channels: int = 1
    out_channels: int = 1
    cond_channels: int = 0
    sample_size: int = 32
    base_filters: int = 32
    multipliers: tuple[int, ...] = (1, 2, 4)
    res_layers_per_block: int = 1
    attention_resolutions: tuple[int, ...] = (8, 16)
    attention_heads: int = 1
    time_embed_dim: int | None = None
    cross_attn: CrossAttnConfig | None = None
    norm_groups: int = 8

    def __post_init__(self):
        self.multipliers = tuple(int(m) for m in self.multipliers)
        self.attention_resolutions = tuple(sorted(int(r) for r in self.attention_resolutions))
        if isinstance(self.cross_attn, dict):
            self.cross_attn = CrossAttnConfig(**self.cross_attn)
        if not self.multipliers:
            raise ValueError("multipliers must be non-empty")
        dims = [self.in_channels, self.out_channels, self.sample_size, self.base_filters,
                self.res_layers_per_block, *self.multipliers]
        if min(dims) < 1 or self.cond_channels < 0:
            raise ValueError("U-net dimensions must be positive")
        for r in self.attention_resolutions:
            if r < 1 or r & (r - 1):
                raise ValueError(f"attention resolution {r} is not a power of two")
        if self.sample_size % self.divisor:
            raise ValueError(f"sample_size {self.sample_size} not divisible by {self.divisor}")

    @property
    def divisor(self) -> int:
        return 2 ** (len(self.multipliers) - 1)

    @property
    def temb_dim(self) -> int:
        return self.time_embed_dim or 4 * self.base_filters

    def to_dict(self) -> dict:
        d = asdict(self)
        d["multipliers"] = list(self.multipliers)
        d["attention_resolutions"] = list(self.attention_resolutions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> UNetConfig:
        return cls(**d)


class UNet:
    """ε-predictor ``net(x_t, t, cond)`` with the shape contract of a denoiser."""

    def __init__(self, config: UNetConfig, rng: RngState | int = 0, dtype=np.float32):
        if not isinstance(rng, RngState):
            rng = RngState(rng)
        self.config = cfg = config
        self.dtype = np.dtype(dtype)
        self.params = p = ParamSet()
        base, g = cfg.base_filters, cfg.norm_groups
        temb = cfg.temb_dim
        d_tau = cfg.cross_attn.d_tau if cfg.cross_attn else None
        cross_heads = cfg.cross_attn.heads if cfg.cross_attn else 1

        def attn(name, ch):
            return AttentionBlock(p, name, ch, rng, cfg.attention_heads, g, d_tau, cross_heads, dtype)

        self.time1 = Linear(p, "time.0", base, temb, rng, dtype)
        self.time2 = Linear(p, "time.1", temb, temb, rng, dtype)
        self.conv_in = Conv2d(p, "conv_in", cfg.in_channels + cfg.cond_channels, base, rng, dtype=dtype)

        chans = [base]
        ch = base
        res = cfg.sample_size
        self.down: list[tuple[list, object | None]] = []
        for i, mult in enumerate(cfg.multipliers):
            blocks = []
            for j in range(cfg.res_layers_per_block):
                out_ch = base * mult
                rb = ResBlock(p, f"down.{i}.res.{j}", ch, out_ch, rng, temb, g, dtype)
                ch = out_ch
                at = attn(f"down.{i}.attn.{j}", ch) if res in cfg.attention_resolutions else None
                blocks.append((rb, at))
                chans.append(ch)
            ds = None
            if i < len(cfg.multipliers) - 1:
                ds = Downsample(p, f"down.{i}.downsample", ch, rng, dtype)
                chans.append(ch)
                res //= 2
            self.down.append((blocks, ds))

        self.mid1 = ResBlock(p, "mid.res.0", ch, ch, rng, temb, g, dtype)
        self.mid_attn = attn("mid.attn", ch)
        self.mid2 = ResBlock(p, "mid.res.1", ch, ch, rng, temb, g, dtype)

        self.up: list[tuple[list, object | None]] = []
        for i in reversed(range(len(cfg.multipliers))):
            blocks = []
            for j in range(cfg.res_layers_per_block + 1):
                out_ch = base * cfg.multipliers[i]
                rb = ResBlock(p, f"up.{i}.res.{j}", ch + chans.pop(), out_ch, rng, temb, g, dtype)
                ch = out_ch
                at = attn(f"up.{i}.attn.{j}", ch) if res in cfg.attention_resolutions else None
                blocks.append((rb, at))
            us = None
            if i > 0:
                us = Upsample(p, f"up.{i}.upsample", ch, rng, dtype)
                res *= 2
            self.up.append((blocks, us))

        self.norm_out = GroupNorm(p, "norm_out", ch, g, dtype)
        self.conv_out = Conv2d(p, "conv_out", ch, cfg.out_channels, rng, dtype=dtype, zero=True)

    def time_embedding(self, t) -> Tensor:
        t = np.atleast_1d(np.asarray(t))
        emb = Tensor(sinusoidal_embedding(t, self.config.base_filters, self.dtype))
        return self.time2(T.silu(self.time1(emb)))

    def __call__(self, x, t, cond: Conditioning | None = None) -> Tensor:
        cfg = self.config
        cond = cond or Conditioning.none()
        x = T.as_tensor(x)
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"U-net expects [N,{cfg.in_channels},H,W], got {x.shape}")
        n, _, h, w = x.shape
        if h % cfg.divisor or w % cfg.divisor:
            raise ShapeError(f"spatial size {h}x{w} not divisible by {cfg.divisor}")
        t = np.asarray(t)
        if t.ndim == 0:
            t = np.full(n, int(t))
        if t.shape != (n,):
            raise ShapeError(f"need one timestep per sample, got shape {t.shape} for batch {n}")

        context, key_mask = None, None
        if cond.variant == "concat_image":
            img = cond.value
            if img.shape != (n, cfg.cond_channels, h, w):
                raise ShapeError(f"concatenated conditioning {img.shape} != expected {(n, cfg.cond_channels, h, w)}")
            if img.dtype != self.dtype:
                img = Tensor(img.data.astype(self.dtype))
            x = T.concat([x, img], axis=1)
        elif cfg.cond_channels:
            raise ShapeError("this U-net expects a concatenated conditioning image")
        if cond.variant == "embedding":
            if cfg.cross_attn is None:
                raise ShapeError("embedding conditioning given to a U-net without cross-attention")
            context, key_mask = cond.value, cond.key_mask
            if context.ndim == 2:
                context = T.reshape(context, (1,) + context.shape)
            if context.shape[-1] != cfg.cross_attn.d_tau:
                raise ShapeError(f"embedding width {context.shape[-1]} != d_tau {cfg.cross_attn.d_tau}")

        temb = self.time_embedding(t)
        hcur = self.conv_in(x)
        skips = [hcur]
        for blocks, ds in self.down:
            for rb, at in blocks:
                hcur = rb(hcur, temb)
                if at is not None:
                    hcur = at(hcur, context, key_mask)
                skips.append(hcur)
            if ds is not None:
                hcur = ds(hcur)
                skips.append(hcur)
        hcur = self.mid2(self.mid_attn(self.mid1(hcur, temb), context, key_mask), temb)
        for blocks, us in self.up:
            for rb, at in blocks:
                hcur = rb(T.concat([hcur, skips.pop()], axis=1), temb)
                if at is not None:
                    hcur = at(hcur, context, key_mask)
            if us is not None:
                hcur = us(hcur)
        return self.conv_out(T.silu(self.norm_out(hcur)))
