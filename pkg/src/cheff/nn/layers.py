"""Parameterized building blocks shared by the U-net, autoencoder and text encoder.

Each layer registers its tensors in a :class:`~cheff.optim.ParamSet` under a
dotted prefix at construction time and keeps references to them, so loading
a state dict or taking an optimizer step is visible to the layer directly.
"""

from __future__ import annotations

import math

import numpy as np

from cheff import tensor as T
from cheff.errors import ShapeError
from cheff.optim import ParamSet
from cheff.rng import RngState
from cheff.tensor import Tensor


def he_uniform(rng: RngState, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return ((rng.uniform(shape) * 2.0 - 1.0) * bound).astype(dtype)


def norm_groups(channels: int, preferred: int) -> int:
    """Largest group count <= ``preferred`` that divides ``channels``."""
    return math.gcd(channels, preferred) or 1


def sinusoidal_embedding(t, dim: int, dtype=np.float64) -> np.ndarray:
    """``[sin(t·ω_k) ..., cos(t·ω_k) ...]`` with ω_k = 10000^(-2k/dim).

    Scalar ``t`` gives shape ``[dim]``; an array of N timesteps gives ``[N, dim]``.
    """
    if dim % 2:
        raise ValueError(f"embedding dimension must be even, got {dim}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0):
        raise ValueError("timesteps must be non-negative")
    k = np.arange(dim // 2, dtype=np.float64)
    omega = 10000.0 ** (-2.0 * k / dim)
    angles = t_arr[..., None] * omega
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1).astype(dtype)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, heads: int = 1,
                         key_mask: np.ndarray | None = None) -> Tensor:
    """Multi-head softmax(QKᵀ/√d)V for ``q[N,M,D]``, ``k[N,L,D]``, ``v[N,L,Dv]``."""
    n, m, d = q.shape
    l = k.shape[1]
    dv = v.shape[2]
    if d % heads or dv % heads:
        raise ShapeError(f"{heads} heads do not divide widths {d}/{dv}")
    dh, dvh = d // heads, dv // heads
    qh = T.transpose(T.reshape(q, (n, m, heads, dh)), (0, 2, 1, 3))
    kh = T.transpose(T.reshape(k, (n, l, heads, dh)), (0, 2, 3, 1))
    vh = T.transpose(T.reshape(v, (n, l, heads, dvh)), (0, 2, 1, 3))
    scores = T.matmul(qh, kh) * (1.0 / math.sqrt(dh))
    mask = None if key_mask is None else np.asarray(key_mask, bool)[:, None, None, :]
    weights = T.softmax(scores, axis=-1, mask=mask)
    out = T.matmul(weights, vh)
    return T.reshape(T.transpose(out, (0, 2, 1, 3)), (n, m, dv))


def cross_attention(features, cond, w_q, w_k, w_v, heads: int = 1, key_mask=None) -> Tensor:
    """Attention with queries from ``features`` and keys/values from ``cond``.

    ``features`` is ``[M, d_e]`` (or batched ``[N, M, d_e]``), ``cond`` is
    ``[L, d_t]``; weights follow the row-major convention
    ``w_q: [d_q, d_e]``, ``w_k: [d_k, d_t]``, ``w_v: [d_v, d_t]`` with
    ``d_q == d_k``, so ``Q = features · w_qᵀ``.
    """
    features, cond = T.as_tensor(features), T.as_tensor(cond)
    w_q, w_k, w_v = (T.as_tensor(w, like=features) for w in (w_q, w_k, w_v))
    unbatched = features.ndim == 2
    if unbatched:
        features = T.reshape(features, (1,) + features.shape)
    if cond.ndim == 2:
        cond = T.reshape(cond, (1,) + cond.shape)
    if w_q.shape[0] != w_k.shape[0]:
        raise ShapeError(f"query width {w_q.shape} must equal key width {w_k.shape}")
    if w_q.shape[1] != features.shape[-1]:
        raise ShapeError(f"W_Q {w_q.shape} does not accept features of width {features.shape[-1]}")
    if w_k.shape[1] != cond.shape[-1] or w_v.shape[1] != cond.shape[-1]:
        raise ShapeError(f"W_K {w_k.shape} / W_V {w_v.shape} do not accept conditioning width {cond.shape[-1]}")
    if cond.shape[0] != features.shape[0]:
        if cond.shape[0] != 1:
            raise ShapeError(f"batch mismatch {features.shape} vs {cond.shape}")
        cond = T.concat([cond] * features.shape[0], axis=0)
    q = T.linear(features, T.transpose(w_q))
    k = T.linear(cond, T.transpose(w_k))
    v = T.linear(cond, T.transpose(w_v))
    out = scaled_dot_attention(q, k, v, heads, key_mask)
    return T.reshape(out, out.shape[1:]) if unbatched else out


class Linear:
    def __init__(self, params: ParamSet, name: str, d_in: int, d_out: int, rng: RngState,
                 dtype=np.float32, bias: bool = True, zero: bool = False):
        w = np.zeros((d_in, d_out), dtype) if zero else he_uniform(rng, (d_in, d_out), d_in, dtype)
        self.weight = params.add(f"{name}.weight", w)
        self.bias = params.add(f"{name}.bias", np.zeros(d_out, dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d:
    def __init__(self, params: ParamSet, name: str, c_in: int, c_out: int, rng: RngState,
                 kernel: int = 3, stride: int = 1, dtype=np.float32, zero: bool = False):
        shape = (c_out, c_in, kernel, kernel)
        fan_in = c_in * kernel * kernel
        w = np.zeros(shape, dtype) if zero else he_uniform(rng, shape, fan_in, dtype)
        self.weight = params.add(f"{name}.weight", w)
        self.bias = params.add(f"{name}.bias", np.zeros(c_out, dtype))
        self.stride = stride
        self.padding = kernel // 2

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class GroupNorm:
    def __init__(self, params: ParamSet, name: str, channels: int, groups: int, dtype=np.float32):
        self.groups = norm_groups(channels, groups)
        self.gain = params.add(f"{name}.gain", np.ones(channels, dtype))
        self.bias = params.add(f"{name}.bias", np.zeros(channels, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.gain, self.bias)


class LayerNorm:
    def __init__(self, params: ParamSet, name: str, dim: int, dtype=np.float32):
        self.gain = params.add(f"{name}.gain", np.ones(dim, dtype))
        self.bias = params.add(f"{name}.bias", np.zeros(dim, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class ResBlock:
    """GN-SiLU-conv twice, optional additive time projection, residual skip."""

    def __init__(self, params: ParamSet, name: str, c_in: int, c_out: int, rng: RngState,
                 temb_dim: int | None = None, groups: int = 8, dtype=np.float32):
        self.norm1 = GroupNorm(params, f"{name}.norm1", c_in, groups, dtype)
        self.conv1 = Conv2d(params, f"{name}.conv1", c_in, c_out, rng, dtype=dtype)
        self.temb = Linear(params, f"{name}.temb", temb_dim, c_out, rng, dtype) if temb_dim else None
        self.norm2 = GroupNorm(params, f"{name}.norm2", c_out, groups, dtype)
        self.conv2 = Conv2d(params, f"{name}.conv2", c_out, c_out, rng, dtype=dtype)
        self.skip = Conv2d(params, f"{name}.skip", c_in, c_out, rng, kernel=1, dtype=dtype) \
            if c_in != c_out else None

    def __call__(self, x: Tensor, temb: Tensor | None = None) -> Tensor:
        h = self.conv1(T.silu(self.norm1(x)))
        if self.temb is not None and temb is not None:
            proj = self.temb(T.silu(temb))
            h = h + T.reshape(proj, proj.shape + (1, 1))
        h = self.conv2(T.silu(self.norm2(h)))
        return (self.skip(x) if self.skip is not None else x) + h


class AttentionBlock:
    """Spatial self-attention, followed by cross-attention when ``d_tau`` is set."""

    def __init__(self, params: ParamSet, name: str, channels: int, rng: RngState, heads: int = 1,
                 groups: int = 8, d_tau: int | None = None, cross_heads: int = 1, dtype=np.float32):
        self.heads = heads
        self.norm = GroupNorm(params, f"{name}.norm", channels, groups, dtype)
        self.qkv = Linear(params, f"{name}.qkv", channels, 3 * channels, rng, dtype)
        self.proj = Linear(params, f"{name}.proj", channels, channels, rng, dtype)
        self.cross = None
        if d_tau:
            self.cross_heads = cross_heads
            self.cross_norm = LayerNorm(params, f"{name}.cross_norm", channels, dtype)
            self.w_q = params.add(f"{name}.cross.w_q", he_uniform(rng, (channels, channels), channels, dtype))
            self.w_k = params.add(f"{name}.cross.w_k", he_uniform(rng, (channels, d_tau), d_tau, dtype))
            self.w_v = params.add(f"{name}.cross.w_v", he_uniform(rng, (channels, d_tau), d_tau, dtype))
            self.cross_proj = Linear(params, f"{name}.cross.proj", channels, channels, rng, dtype)
            self.cross = True

    def __call__(self, x: Tensor, context: Tensor | None = None, key_mask=None) -> Tensor:
        n, c, h, w = x.shape
        tokens = T.transpose(T.reshape(self.norm(x), (n, c, h * w)), (0, 2, 1))
        qkv = self.qkv(tokens)
        q, k, v = qkv[:, :, :c], qkv[:, :, c:2 * c], qkv[:, :, 2 * c:]
        seq = T.transpose(T.reshape(x, (n, c, h * w)), (0, 2, 1))
        seq = seq + self.proj(scaled_dot_attention(q, k, v, self.heads))
        if self.cross and context is not None:
            att = cross_attention(self.cross_norm(seq), context, self.w_q, self.w_k, self.w_v,
                                  self.cross_heads, key_mask)
            seq = seq + self.cross_proj(att)
        return T.reshape(T.transpose(seq, (0, 2, 1)), (n, c, h, w))


class Downsample:
    def __init__(self, params: ParamSet, name: str, channels: int, rng: RngState, dtype=np.float32):
        self.conv = Conv2d(params, f"{name}.conv", channels, channels, rng, stride=2, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(x)


class Upsample:
    def __init__(self, params: ParamSet, name: str, channels: int, rng: RngState, dtype=np.float32):
        self.conv = Conv2d(params, f"{name}.conv", channels, channels, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(T.upsample_nearest(x, 2))
