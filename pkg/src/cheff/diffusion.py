"""Forward corruption, the noise-prediction objective and reverse samplers.

A *denoiser* is any callable ``denoiser(x_t, t, cond) -> eps_hat`` where
``x_t`` is a ``Tensor[N, ...]``, ``t`` an integer array of shape ``[N]``
(1-based timesteps) and ``cond`` a :class:`Conditioning`.  It must return a
tensor of the same shape as ``x_t``.

Samplers work on plain numpy arrays under :func:`cheff.tensor.no_grad`.
Random draws come from an :class:`~cheff.rng.RngState`, or from a list of
them (one per batch element) when each sample needs its own stream.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence, Union

import numpy as np

from cheff.errors import ShapeError
from cheff.rng import RngState
from cheff.schedules import DdimPlan, NoiseSchedule, ddim_subsequence
from cheff.tensor import Tensor, as_tensor, mean, no_grad

RngLike = Union[RngState, Sequence[RngState]]


@dataclass(frozen=True)
class Conditioning:
    """What a denoiser is conditioned on besides ``(x_t, t)``.

    ``embedding`` carries a ``[N, L, d]`` sequence (with an optional ``[N, L]``
    boolean key mask for padded rows); ``concat_image`` carries an image
    joined to ``x_t`` along the channel axis.
    """

    variant: str = "none"
    value: Tensor | None = None
    key_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.variant not in ("none", "embedding", "concat_image"):
            raise ValueError(f"unknown conditioning variant {self.variant!r}")
        if self.variant != "none" and self.value is None:
            raise ValueError(f"{self.variant} conditioning needs a value")
        if self.value is not None:
            object.__setattr__(self, "value", as_tensor(self.value))
            if not np.all(np.isfinite(self.value.data)):
                raise ValueError("conditioning values must be finite")

    @classmethod
    def none(cls) -> Conditioning:
        return cls()

    @classmethod
    def embedding(cls, value, key_mask=None) -> Conditioning:
        return cls("embedding", value, None if key_mask is None else np.asarray(key_mask, bool))

    @classmethod
    def concat_image(cls, value) -> Conditioning:
        return cls("concat_image", value)

    def select(self, index) -> Conditioning:
        """Restrict batched conditioning to ``index`` along the batch axis."""
        if self.variant == "none":
            return self
        mask = None if self.key_mask is None else self.key_mask[index]
        return Conditioning(self.variant, self.value[index], mask)


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ddim"
    sigma_choice: str = "beta_tilde"
    plan: DdimPlan | None = None
    clip_x0: bool = True

    def __post_init__(self):
        if self.kind not in ("ddpm", "ddim"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.sigma_choice not in ("beta", "beta_tilde"):
            raise ValueError(f"unknown sigma choice {self.sigma_choice!r}")
        if self.kind == "ddim" and self.plan is None:
            raise ValueError("DDIM sampling needs a DdimPlan")

    @classmethod
    def ddpm(cls, sigma_choice: str = "beta_tilde", clip_x0: bool = True) -> SamplerConfig:
        return cls("ddpm", sigma_choice, None, clip_x0)

    @classmethod
    def ddim(cls, T: int, steps: int, eta: float = 0.0, clip_x0: bool = True) -> SamplerConfig:
        return cls("ddim", "beta_tilde", ddim_subsequence(T, steps, eta), clip_x0)


def _bcast(coef, ndim: int) -> np.ndarray:
    coef = np.asarray(coef, dtype=np.float64)
    return coef.reshape(coef.shape + (1,) * (ndim - coef.ndim)) if coef.ndim else coef


def _batch_t(t, n: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    return np.full(n, int(t)) if t.ndim == 0 else t


# -- forward process ---------------------------------------------------
def q_sample(x0, t, eps, s: NoiseSchedule):
    """√ᾱ_t·x0 + √(1-ᾱ_t)·eps; ``t`` is an int or a per-sample ``[N]`` array."""
    tensor_in = isinstance(x0, Tensor) or isinstance(eps, Tensor)
    x0_data = x0.data if isinstance(x0, Tensor) else np.asarray(x0)
    eps_data = eps.data if isinstance(eps, Tensor) else np.asarray(eps)
    if x0_data.shape != eps_data.shape:
        raise ShapeError(f"eps shape {eps_data.shape} != x0 shape {x0_data.shape}")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > s.T):
        raise ValueError(f"timestep out of range 1..{s.T}")
    abar = s.alpha_bar(t)
    if t.ndim == 1:
        abar = _bcast(abar, x0_data.ndim)
    a = np.sqrt(abar).astype(x0_data.dtype)
    b = np.sqrt(1.0 - abar).astype(x0_data.dtype)
    if tensor_in:
        return as_tensor(x0) * a + as_tensor(eps) * b
    return a * x0_data + b * eps_data


def training_loss(x0_batch, denoiser: Callable, s: NoiseSchedule, cond: Conditioning | None,
                  rng: RngState, t=None, eps=None) -> Tensor:
    """Mean squared error between the drawn noise and the denoiser's estimate.

    Draws ``t ~ U{1..T}`` then ``eps ~ N(0, I)`` per sample unless given.
    With ``cond`` carrying an embedding this is the latent text-conditioned
    objective; with a concatenated low-resolution image it is the
    super-resolution objective.
    """
    x0 = as_tensor(x0_batch)
    n = x0.shape[0]
    if n < 1:
        raise ShapeError("training batch is empty")
    cond = cond or Conditioning.none()
    if t is None:
        t = rng.integers(1, s.T + 1, size=n)
    t = _batch_t(t, n)
    if eps is None:
        eps = rng.normal(x0.shape, dtype=x0.dtype)
    eps = np.asarray(eps.data if isinstance(eps, Tensor) else eps, dtype=x0.dtype)
    x_t = q_sample(x0.data, t, eps, s)
    pred = denoiser(Tensor(x_t), t, cond)
    if pred.shape != x0.shape:
        raise ShapeError(f"denoiser returned {pred.shape}, expected {x0.shape}")
    diff = pred - eps
    return mean(diff * diff)


# -- reverse steps -----------------------------------------------------
def ddpm_sigma(s: NoiseSchedule, t, sigma_choice: str = "beta_tilde"):
    if sigma_choice == "beta":
        return np.sqrt(s.beta(t))
    if sigma_choice == "beta_tilde":
        return np.sqrt(s.beta_tilde(t))
    raise ValueError(f"unknown sigma choice {sigma_choice!r}")


def predict_x0(x_t, t, eps_hat, s: NoiseSchedule):
    abar = _bcast(s.alpha_bar(t), np.ndim(x_t))
    return (x_t - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)


def ddpm_step(x_t, t: int, eps_hat, s: NoiseSchedule, cfg: SamplerConfig | str = "beta_tilde",
              noise=None):
    """One ancestral step x_t -> x_{t-1}.

    Without x0 clipping this is the textbook update
    ``(x_t - β_t/√(1-ᾱ_t)·ε̂)/√(1-β_t) + σ_t·noise``.  With clipping the
    posterior mean is formed from the clipped x̂0 instead.
    """
    if isinstance(cfg, str):
        cfg = SamplerConfig.ddpm(cfg, clip_x0=False)
    t = int(t)
    if not 1 <= t <= s.T:
        raise ValueError(f"timestep {t} out of range 1..{s.T}")
    x_t = np.asarray(x_t)
    eps_hat = np.asarray(eps_hat)
    if noise is None:
        noise = np.zeros_like(x_t)
    noise = np.asarray(noise)
    if t == 1 and np.any(noise != 0):
        raise ValueError("the final step (t=1) must not add noise")
    beta = float(s.beta(t))
    abar = float(s.alpha_bar(t))
    abar_prev = float(s.alpha_bar(t - 1))
    sigma = float(ddpm_sigma(s, t, cfg.sigma_choice))
    if cfg.clip_x0:
        x0 = np.clip((x_t - np.sqrt(1 - abar) * eps_hat) / np.sqrt(abar), -1.0, 1.0)
        mean_ = (np.sqrt(abar_prev) * beta / (1 - abar)) * x0 \
            + (np.sqrt(1 - beta) * (1 - abar_prev) / (1 - abar)) * x_t
    else:
        mean_ = (x_t - (beta / np.sqrt(1 - abar)) * eps_hat) / np.sqrt(1 - beta)
    out = mean_ + sigma * noise
    return out.astype(x_t.dtype, copy=False)


def ddim_sigma(s: NoiseSchedule, t_from: int, t_to: int, eta: float) -> float:
    a_from = float(s.alpha_bar(t_from))
    a_to = float(s.alpha_bar(t_to))
    return eta * np.sqrt((1 - a_to) / (1 - a_from)) * np.sqrt(1 - a_from / a_to)


def ddim_step(x_t, t_from: int, t_to: int, eps_hat, s: NoiseSchedule, eta: float = 0.0,
              noise=None, clip_x0: bool = False):
    """Jump from ``t_from`` to an earlier ``t_to`` (``t_to = 0`` yields x0)."""
    t_from, t_to = int(t_from), int(t_to)
    if not 0 <= t_to < t_from <= s.T:
        raise ValueError(f"need 0 <= t_to < t_from <= {s.T}, got {t_from} -> {t_to}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    x_t = np.asarray(x_t)
    eps_hat = np.asarray(eps_hat)
    a_from = float(s.alpha_bar(t_from))
    a_to = float(s.alpha_bar(t_to))
    x0 = (x_t - np.sqrt(1 - a_from) * eps_hat) / np.sqrt(a_from)
    if clip_x0:
        x0 = np.clip(x0, -1.0, 1.0)
    sigma = ddim_sigma(s, t_from, t_to, eta)
    out = np.sqrt(a_to) * x0 + np.sqrt(max(1 - a_to - sigma**2, 0.0)) * eps_hat
    if sigma > 0 and noise is not None:
        out = out + sigma * np.asarray(noise)
    return out.astype(x_t.dtype, copy=False)


# -- sampling loops ----------------------------------------------------
def _normal(rng: RngLike, shape, dtype) -> np.ndarray:
    if isinstance(rng, RngState):
        return rng.normal(shape, dtype=dtype)
    rngs = list(rng)
    if len(rngs) != shape[0]:
        raise ValueError(f"{len(rngs)} random streams for a batch of {shape[0]}")
    return np.stack([r.normal(shape[1:], dtype=dtype) for r in rngs])


def _spawn(rng: RngLike, key: int) -> RngLike:
    if isinstance(rng, RngState):
        return rng.spawn(key)
    return [r.spawn(key) for r in rng]


def _transitions(s: NoiseSchedule, cfg: SamplerConfig) -> list[tuple[int, int]]:
    if cfg.kind == "ddpm":
        return [(t, t - 1) for t in range(s.T, 0, -1)]
    if cfg.plan.T > s.T:
        raise ValueError(f"DDIM plan reaches t={cfg.plan.T} beyond schedule T={s.T}")
    return cfg.plan.transitions()


def reverse_process(denoiser: Callable, x_T: np.ndarray, s: NoiseSchedule, cfg: SamplerConfig,
                    cond: Conditioning | None, rng: RngLike,
                    after_step: Callable[[np.ndarray, int], np.ndarray] | None = None) -> np.ndarray:
    """Run the configured sampler from ``x_T`` down to t = 0.

    Noise for a transition ``t -> t_to`` is drawn only when ``t_to >= 1``,
    so DDPM and a full-plan DDIM consume identical random streams.
    ``after_step(x, t_to)`` may replace the state after every transition.
    """
    cond = cond or Conditioning.none()
    x = np.asarray(x_T)
    n = x.shape[0]
    with no_grad():
        for t_from, t_to in _transitions(s, cfg):
            eps_hat = denoiser(Tensor(x), np.full(n, t_from), cond).data
            noise = _normal(rng, x.shape, x.dtype) if t_to >= 1 else None
            if cfg.kind == "ddpm":
                x = ddpm_step(x, t_from, eps_hat, s, cfg, noise)
            else:
                x = ddim_step(x, t_from, t_to, eps_hat, s, cfg.plan.eta, noise, cfg.clip_x0)
            if after_step is not None:
                x = after_step(x, t_to)
    return x


def sample(denoiser: Callable, shape, s: NoiseSchedule, cfg: SamplerConfig,
           cond: Conditioning | None = None, rng: RngLike | None = None,
           dtype=np.float32) -> np.ndarray:
    """Draw ``shape[0]`` samples starting from isotropic noise."""
    if rng is None:
        raise ValueError("sample() needs an explicit RngState")
    shape = tuple(int(d) for d in shape)
    if not shape or min(shape) < 1:
        raise ShapeError(f"invalid sample shape {shape}")
    x_T = _normal(rng, shape, dtype)
    return reverse_process(denoiser, x_T, s, cfg, cond, rng)


def check_mask(mask, shape) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape != tuple(shape):
        raise ShapeError(f"mask shape {mask.shape} != image shape {tuple(shape)}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary (0 keeps, 1 synthesizes)")
    return mask.astype(bool)


def inpaint(denoiser: Callable, x_known, mask, s: NoiseSchedule, cfg: SamplerConfig,
            cond: Conditioning | None = None, rng: RngLike | None = None) -> np.ndarray:
    """Regenerate the region where ``mask == 1`` and keep the rest of ``x_known``.

    After every reverse transition the known region is replaced by a fresh
    forward-noised copy of ``x_known`` at the new timestep; the final state
    takes ``x_known`` verbatim outside the mask.  Sampler noise comes from
    ``rng`` exactly as in :func:`sample`; the re-noising draws come from a
    spawned child stream, so an all-ones mask reproduces :func:`sample`.
    """
    if rng is None:
        raise ValueError("inpaint() needs an explicit RngState")
    x_known = np.asarray(x_known)
    keep_out = check_mask(mask, x_known.shape)
    known_rng = _spawn(rng, 1)

    def composite(x, t_to):
        if t_to == 0:
            return np.where(keep_out, x, x_known)
        noisy = q_sample(x_known, t_to, _normal(known_rng, x.shape, x.dtype), s).astype(x.dtype)
        return np.where(keep_out, x, noisy)

    x_T = _normal(rng, x_known.shape, x_known.dtype)
    return reverse_process(denoiser, x_T, s, cfg, cond, rng, after_step=composite)


def outpaint(denoiser: Callable, x_known, mask, s: NoiseSchedule, cfg: SamplerConfig,
             cond: Conditioning | None = None, rng: RngState | None = None,
             n_variants: int = 1) -> list[np.ndarray]:
    """``n_variants`` independent completions sharing the unmasked region."""
    if rng is None:
        raise ValueError("outpaint() needs an explicit RngState")
    if n_variants < 1:
        raise ValueError("n_variants must be >= 1")
    if n_variants == 1:
        return [inpaint(denoiser, x_known, mask, s, cfg, cond, rng)]
    return [inpaint(denoiser, x_known, mask, s, cfg, cond, child) for child in rng.fork(n_variants)]


def with_clip(cfg: SamplerConfig, clip_x0: bool) -> SamplerConfig:
    return replace(cfg, clip_x0=clip_x0)
