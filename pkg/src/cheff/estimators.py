"""scikit-learn style estimators for the three trainable stages.

``LatentAutoencoder``   fit / transform / inverse_transform on ``[N,1,H,W]`` images
``SemanticDiffusion``   fit on latents (optionally with reports) / sample
``SuperResolution``     fit on (HR, LR) pairs / finetune / predict

Images are float arrays in [-1, 1].  Each estimator serializes to ``CHKP1``
bytes and rebuilds from them, so the checkpoint files are the only state
crossing pipeline stages.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from cheff import tensor as T
from cheff.data import Vocabulary, tokenize
from cheff.diffusion import Conditioning, SamplerConfig, sample, training_loss
from cheff.errors import CheckpointError, CheckpointKindError, NumericError, ShapeError
from cheff.nn.autoencoder import Autoencoder, AutoencoderSpec, ae_loss
from cheff.nn.checkpoint import KIND_AE, KIND_SDM, KIND_SR, KIND_TXT, Checkpoint, save_checkpoint
from cheff.nn.text import TextEncoder, TextEncoderSpec
from cheff.nn.unet import CrossAttnConfig, UNet, UNetConfig
from cheff.optim import ParamSet, adam_step
from cheff.resize import resize_array
from cheff.rng import RngState
from cheff.schedules import make_schedule

EVAL_SIZE = 64
INFER_CHUNK = 16


# -- validation helpers ------------------------------------------------
def check_images(X, name: str = "X", channels: int | None = None, multiple_of: int = 1) -> np.ndarray:
    """Validate an image batch and return it as float32 ``[N, C, H, W]``.

    ``[N, H, W]`` input gains a channel axis.  Values must be finite.
    """
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float32,
                    ensure_all_finite=True, input_name=name)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ShapeError(f"{name} must be [N,C,H,W] or [N,H,W], got shape {X.shape}")
    if channels is not None and X.shape[1] != channels:
        raise ShapeError(f"{name} must have {channels} channel(s), got {X.shape[1]}")
    if X.shape[2] % multiple_of or X.shape[3] % multiple_of:
        raise ShapeError(f"{name} spatial size {X.shape[2:]} not divisible by {multiple_of}")
    return X


def as_rng(rng, default: RngState) -> RngState:
    if rng is None:
        return default
    return rng if isinstance(rng, RngState) else RngState(int(rng))


def _tuple(v) -> tuple[int, ...]:
    return tuple(int(x) for x in v)


def _json_params(est: BaseEstimator) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in est.get_params().items()}


def _batch_stream(n: int, batch_size: int, rng: RngState):
    """Endless fixed-seed sequence of index batches, reshuffled every epoch."""
    pool = np.empty(0, dtype=np.int64)
    while True:
        while pool.size < batch_size:
            pool = np.concatenate([pool, rng.permutation(n)])
        yield pool[:batch_size]
        pool = pool[batch_size:]


def run_training(param_sets: Sequence[ParamSet], loss_fn: Callable, n: int, n_steps: int,
                 batch_size: int, lr: float, rng: RngState) -> list[float]:
    """Adam on ``loss_fn(batch_indices)``; returns the per-step loss curve."""
    curve: list[float] = []
    if n_steps <= 0:
        return curve
    batches = _batch_stream(n, min(batch_size, n), rng)
    for step in range(n_steps):
        for ps in param_sets:
            ps.zero_grad()
        loss = loss_fn(next(batches))
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss {value} at step {step}")
        T.backward(loss)
        for ps in param_sets:
            grads = ps.grads()
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NumericError(f"non-finite gradient at step {step}")
            adam_step(ps, grads, lr)
        curve.append(value)
    return curve


def _chunked(fn: Callable[[np.ndarray], np.ndarray], X: np.ndarray, size: int = INFER_CHUNK) -> np.ndarray:
    with T.no_grad():
        return np.concatenate([fn(X[i:i + size]) for i in range(0, len(X), size)])


def _eval_subset(n: int) -> np.ndarray:
    return np.arange(min(n, EVAL_SIZE))


def _sampler(kind: str, T_: int, steps: int, eta: float, sigma: str, clip: bool) -> SamplerConfig:
    if kind == "ddpm":
        return SamplerConfig.ddpm(sigma, clip_x0=clip)
    return SamplerConfig.ddim(T_, steps, eta, clip_x0=clip)


def _check_kind(ckpt: Checkpoint, kind: int) -> None:
    if ckpt.kind != kind:
        raise CheckpointKindError(f"checkpoint kind {ckpt.kind_name} cannot build this estimator")


# -- autoencoder -------------------------------------------------------
class LatentAutoencoder(TransformerMixin, BaseEstimator):
    """KL autoencoder; ``transform`` returns posterior means."""

    def __init__(self, channels=(32, 64, 128), latent_channels=3, downsample_factor=4, res_layers=1,
                 kl_weight=1e-6, norm_groups=8, learning_rate=1e-4, n_steps=300, batch_size=16,
                 random_state=0):
        self.channels = channels
        self.latent_channels = latent_channels
        self.downsample_factor = downsample_factor
        self.res_layers = res_layers
        self.kl_weight = kl_weight
        self.norm_groups = norm_groups
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.random_state = random_state

    def _spec(self) -> AutoencoderSpec:
        return AutoencoderSpec(1, _tuple(self.channels), self.latent_channels, self.downsample_factor,
                               self.res_layers, self.kl_weight, self.norm_groups)

    def _init_net(self) -> None:
        self.spec_ = self._spec()
        self.net_ = Autoencoder(self.spec_, RngState(self.random_state).spawn(0))

    def _loss(self, X, idx, rng) -> T.Tensor:
        return ae_loss(self.net_, X[idx], rng)

    def evaluate_loss(self, X) -> float:
        """Objective on the first ``EVAL_SIZE`` images with a fixed noise draw."""
        check_is_fitted(self, "net_")
        X = check_images(X, channels=1)
        with T.no_grad():
            return float(self._loss(X, _eval_subset(len(X)), RngState(self.random_state).spawn(9)).data)

    def fit(self, X, y=None):
        X = check_images(X, channels=1, multiple_of=self.downsample_factor)
        self._init_net()
        self.input_shape_ = tuple(X.shape[1:])
        self.initial_loss_ = self.evaluate_loss(X)
        rng = RngState(self.random_state).spawn(1)
        self.loss_curve_ = run_training([self.net_.params], lambda idx: self._loss(X, idx, rng), len(X),
                                        self.n_steps, self.batch_size, self.learning_rate, rng)
        self.final_loss_ = self.evaluate_loss(X)
        return self

    def encode(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Posterior ``(mu, std)`` per image."""
        check_is_fitted(self, "net_")
        X = check_images(X, channels=1, multiple_of=self.downsample_factor)

        def enc(b):
            post = self.net_.encode(b)
            return np.concatenate([post.mu.data, np.exp(0.5 * post.logvar.data)], axis=1)

        both = _chunked(enc, X)
        c = self.latent_channels
        return both[:, :c], both[:, c:]

    def transform(self, X) -> np.ndarray:
        return self.encode(X)[0]

    def inverse_transform(self, Z) -> np.ndarray:
        check_is_fitted(self, "net_")
        Z = check_images(Z, "Z", channels=self.latent_channels)
        return _chunked(lambda b: self.net_.decode(b).data, Z)

    def reconstruct(self, X) -> np.ndarray:
        """D(E(x)) through the posterior mean."""
        return self.inverse_transform(self.transform(X))

    def to_checkpoint(self) -> bytes:
        check_is_fitted(self, "net_")
        config = {"params": _json_params(self), "spec": self.spec_.to_dict()}
        return save_checkpoint(KIND_AE, config, self.net_.params.state_dict())

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> LatentAutoencoder:
        _check_kind(ckpt, KIND_AE)
        est = cls(**ckpt.config["params"])
        est._init_net()
        est.net_.params.load_state_dict(ckpt.tensors)
        return est


# -- latent prior ------------------------------------------------------
class SemanticDiffusion(BaseEstimator):
    """Noise-prediction prior over autoencoder latents.

    Passing report strings as ``y`` to :meth:`fit` trains a text encoder
    jointly and conditions the U-net through cross-attention.
    """

    def __init__(self, base_filters=32, multipliers=(1, 2, 4), res_layers=1, attention_resolutions=(8, 4),
                 attention_heads=1, norm_groups=8, schedule="linear", timesteps=1000, beta_start=1e-4,
                 beta_end=0.0295, text_dim=64, text_depth=2, text_heads=4, max_len=150,
                 learning_rate=1e-4, n_steps=500, batch_size=32, sampler="ddim", sampling_steps=150,
                 eta=0.0, sigma_choice="beta_tilde", random_state=0):
        self.base_filters = base_filters
        self.multipliers = multipliers
        self.res_layers = res_layers
        self.attention_resolutions = attention_resolutions
        self.attention_heads = attention_heads
        self.norm_groups = norm_groups
        self.schedule = schedule
        self.timesteps = timesteps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.text_dim = text_dim
        self.text_depth = text_depth
        self.text_heads = text_heads
        self.max_len = max_len
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.sampler = sampler
        self.sampling_steps = sampling_steps
        self.eta = eta
        self.sigma_choice = sigma_choice
        self.random_state = random_state

    def noise_schedule(self):
        return make_schedule(self.schedule, self.timesteps, self.beta_start, self.beta_end)

    def sampler_config(self) -> SamplerConfig:
        # latents are unbounded, so x0 is never clipped here
        return _sampler(self.sampler, self.timesteps, self.sampling_steps, self.eta, self.sigma_choice, False)

    def _init_nets(self, latent_shape, vocab: Vocabulary | None) -> None:
        c, h, w = latent_shape
        if h != w:
            raise ShapeError(f"latents must be square, got {h}x{w}")
        self.latent_shape_ = tuple(int(d) for d in latent_shape)
        self.conditional_ = vocab is not None
        cross = CrossAttnConfig(self.text_dim, self.attention_heads) if self.conditional_ else None
        self.unet_config_ = UNetConfig(c, c, 0, h, self.base_filters, _tuple(self.multipliers), self.res_layers,
                                       _tuple(self.attention_resolutions), self.attention_heads, None, cross,
                                       self.norm_groups)
        root = RngState(self.random_state)
        self.net_ = UNet(self.unet_config_, root.spawn(0))
        self.vocab_ = vocab
        self.text_ = None
        if vocab is not None:
            spec = TextEncoderSpec(len(vocab), self.text_dim, self.text_depth, self.text_heads, self.max_len)
            self.text_ = TextEncoder(spec, root.spawn(3))
        self.schedule_ = self.noise_schedule()

    def _param_sets(self) -> list[ParamSet]:
        return [self.net_.params] + ([self.text_.params] if self.text_ is not None else [])

    def _condition(self, tokens: Sequence[Sequence[int]] | None) -> Conditioning:
        if tokens is None:
            return Conditioning.none()
        value, mask = self.text_.encode_batch(tokens)
        return Conditioning.embedding(value, mask)

    def tokens_for(self, texts: Sequence[str]) -> list[list[int]]:
        return [tokenize(self.vocab_, t or "", self.max_len) for t in texts]

    def _loss(self, Z, Zstd, tokens, idx, rng) -> T.Tensor:
        z = Z[idx]
        if Zstd is not None:
            z = z + Zstd[idx] * rng.normal(z.shape, dtype=z.dtype)
        cond = self._condition(None if tokens is None else [tokens[i] for i in idx])
        return training_loss(z * np.float32(self.latent_scale_), self.net_, self.schedule_, cond, rng)

    def evaluate_loss(self, Z, y=None, Z_std=None) -> float:
        check_is_fitted(self, "net_")
        Z = check_images(Z, "Z", channels=self.latent_shape_[0])
        tokens = self.tokens_for(y) if (y is not None and self.conditional_) else None
        with T.no_grad():
            return float(self._loss(Z, Z_std, tokens, _eval_subset(len(Z)),
                                    RngState(self.random_state).spawn(9)).data)

    def fit(self, Z, y=None, Z_std=None):
        """Train on latent means ``Z`` (drawing ``Z + Z_std·ε`` when given)."""
        Z = check_images(Z, "Z")
        if Z_std is not None:
            Z_std = check_images(Z_std, "Z_std")
            if Z_std.shape != Z.shape:
                raise ShapeError(f"Z_std shape {Z_std.shape} != Z shape {Z.shape}")
        vocab, tokens = None, None
        if y is not None:
            y = [str(r or "") for r in y]
            if len(y) != len(Z):
                raise ShapeError(f"{len(y)} reports for {len(Z)} latents")
            vocab = Vocabulary.build(y)
        self._init_nets(Z.shape[1:], vocab)
        if vocab is not None:
            tokens = self.tokens_for(y)
        spread = float(np.sqrt(Z.var() + (0.0 if Z_std is None else np.mean(Z_std ** 2))))
        self.latent_scale_ = 1.0 / spread if spread > 0 else 1.0
        self.initial_loss_ = self.evaluate_loss(Z, y, Z_std)
        rng = RngState(self.random_state).spawn(1)
        self.loss_curve_ = run_training(self._param_sets(), lambda idx: self._loss(Z, Z_std, tokens, idx, rng),
                                        len(Z), self.n_steps, self.batch_size, self.learning_rate, rng)
        self.final_loss_ = self.evaluate_loss(Z, y, Z_std)
        return self

    def sample(self, n: int, prompt: str | Sequence[str] | None = None, rng=None) -> np.ndarray:
        """``n`` latents (unscaled) from isotropic noise, one forked stream per sample."""
        check_is_fitted(self, "net_")
        if n < 1:
            raise ValueError("n must be >= 1")
        if prompt is not None and not self.conditional_:
            raise ValueError("a prompt needs a model trained with a text encoder")
        cond = Conditioning.none()
        if self.conditional_:
            prompts = [prompt] * n if prompt is None or isinstance(prompt, str) else list(prompt)
            if len(prompts) != n:
                raise ValueError(f"{len(prompts)} prompts for {n} samples")
            with T.no_grad():
                cond = self._condition(self.tokens_for(prompts))
        rng = as_rng(rng, RngState(self.random_state).spawn(2))
        z = sample(self.net_, (n,) + self.latent_shape_, self.schedule_, self.sampler_config(), cond, rng.fork(n))
        return z / np.float32(self.latent_scale_)

    def to_checkpoints(self) -> tuple[bytes, bytes | None]:
        """``(sdm, txt)`` checkpoint bytes; ``txt`` is None when unconditional."""
        check_is_fitted(self, "net_")
        config = {"params": _json_params(self), "unet": self.unet_config_.to_dict(),
                  "latent_shape": list(self.latent_shape_), "latent_scale": self.latent_scale_,
                  "conditional": self.conditional_}
        sdm = save_checkpoint(KIND_SDM, config, self.net_.params.state_dict())
        txt = None
        if self.text_ is not None:
            txt = save_checkpoint(KIND_TXT, {"spec": self.text_.spec.to_dict(), "vocab": self.vocab_.tokens},
                                  self.text_.params.state_dict())
        return sdm, txt

    @classmethod
    def from_checkpoints(cls, sdm: Checkpoint, txt: Checkpoint | None = None) -> SemanticDiffusion:
        _check_kind(sdm, KIND_SDM)
        est = cls(**sdm.config["params"])
        vocab = None
        if sdm.config["conditional"]:
            if txt is None:
                raise CheckpointError("this prior was trained with text conditioning; a TXT checkpoint is required")
            _check_kind(txt, KIND_TXT)
            vocab = Vocabulary(list(txt.config["vocab"]))
        est._init_nets(sdm.config["latent_shape"], vocab)
        est.net_.params.load_state_dict(sdm.tensors)
        if est.text_ is not None:
            est.text_.params.load_state_dict(txt.tensors)
        est.latent_scale_ = float(sdm.config["latent_scale"])
        return est


# -- super-resolution --------------------------------------------------
class SuperResolution(BaseEstimator):
    """Diffusion upsampler conditioned on the bicubic-upsampled low-res image."""

    def __init__(self, base_filters=16, multipliers=(1, 2, 4, 8), res_layers=1, attention_resolutions=(16,),
                 attention_heads=1, norm_groups=8, scale_factor=4, schedule="cosine", timesteps=2000,
                 beta_start=1e-4, beta_end=0.02, learning_rate=5e-5, finetune_learning_rate=2e-5,
                 n_steps=500, batch_size=4, sampler="ddim", sampling_steps=150, eta=0.0,
                 sigma_choice="beta_tilde", random_state=0):
        self.base_filters = base_filters
        self.multipliers = multipliers
        self.res_layers = res_layers
        self.attention_resolutions = attention_resolutions
        self.attention_heads = attention_heads
        self.norm_groups = norm_groups
        self.scale_factor = scale_factor
        self.schedule = schedule
        self.timesteps = timesteps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.learning_rate = learning_rate
        self.finetune_learning_rate = finetune_learning_rate
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.sampler = sampler
        self.sampling_steps = sampling_steps
        self.eta = eta
        self.sigma_choice = sigma_choice
        self.random_state = random_state

    def noise_schedule(self):
        return make_schedule(self.schedule, self.timesteps, self.beta_start, self.beta_end)

    def sampler_config(self) -> SamplerConfig:
        return _sampler(self.sampler, self.timesteps, self.sampling_steps, self.eta, self.sigma_choice, True)

    def _init_net(self, hr_size: int) -> None:
        self.hr_size_ = int(hr_size)
        self.unet_config_ = UNetConfig(1, 1, 1, self.hr_size_, self.base_filters, _tuple(self.multipliers),
                                       self.res_layers, _tuple(self.attention_resolutions),
                                       self.attention_heads, None, None, self.norm_groups)
        self.net_ = UNet(self.unet_config_, RngState(self.random_state).spawn(0))
        self.schedule_ = self.noise_schedule()
        self.finetune_curve_ = []

    def upsample(self, X_lr) -> np.ndarray:
        """Bicubic upsampling of low-res images to the HR grid (the conditioning image)."""
        X_lr = check_images(X_lr, "X_lr", channels=1)
        hr = X_lr.shape[-1] * self.scale_factor
        return resize_array(X_lr, hr, hr).astype(np.float32)

    def downsample(self, X_hr) -> np.ndarray:
        X_hr = check_images(X_hr, "X_hr", channels=1, multiple_of=self.scale_factor)
        lr = X_hr.shape[-1] // self.scale_factor
        return resize_array(X_hr, lr, lr).astype(np.float32)

    def _pairs(self, X_hr, X_lr) -> tuple[np.ndarray, np.ndarray]:
        X_hr = check_images(X_hr, "X_hr", channels=1, multiple_of=self.scale_factor)
        if X_hr.shape[2] != X_hr.shape[3]:
            raise ShapeError(f"images must be square, got {X_hr.shape[2:]}")
        if X_lr is None:
            X_lr = self.downsample(X_hr)
        X_lr = check_images(X_lr, "X_lr", channels=1)
        if len(X_lr) != len(X_hr):
            raise ShapeError(f"{len(X_lr)} low-res images for {len(X_hr)} high-res images")
        if X_lr.shape[2] * self.scale_factor != X_hr.shape[2] or X_lr.shape[3] * self.scale_factor != X_hr.shape[3]:
            raise ShapeError(f"HR {X_hr.shape[2:]} / LR {X_lr.shape[2:]} ratio is not {self.scale_factor}")
        return X_hr, self.upsample(X_lr)

    def _loss(self, X_hr, up, idx, rng) -> T.Tensor:
        return training_loss(X_hr[idx], self.net_, self.schedule_, Conditioning.concat_image(up[idx]), rng)

    def evaluate_loss(self, X_hr, X_lr=None) -> float:
        check_is_fitted(self, "net_")
        X_hr, up = self._pairs(X_hr, X_lr)
        with T.no_grad():
            return float(self._loss(X_hr, up, _eval_subset(len(X_hr)), RngState(self.random_state).spawn(9)).data)

    def fit(self, X_hr, X_lr=None):
        """Train on HR images conditioned on ``X_lr`` (bicubic-downsampled HR when omitted)."""
        X_hr, up = self._pairs(X_hr, X_lr)
        self._init_net(X_hr.shape[-1])
        self.initial_loss_ = self.evaluate_loss(X_hr, X_lr)
        rng = RngState(self.random_state).spawn(1)
        self.loss_curve_ = run_training([self.net_.params], lambda idx: self._loss(X_hr, up, idx, rng), len(X_hr),
                                        self.n_steps, self.batch_size, self.learning_rate, rng)
        self.final_loss_ = self.evaluate_loss(X_hr, X_lr)
        return self

    def finetune(self, X_hr, X_lr, n_steps: int | None = None, learning_rate: float | None = None):
        """Continue training on new pairs, e.g. decoded-latent conditioning images."""
        check_is_fitted(self, "net_")
        X_hr, up = self._pairs(X_hr, X_lr)
        if X_hr.shape[-1] != self.hr_size_:
            raise ShapeError(f"fine-tuning images are {X_hr.shape[-1]}px, model was trained on {self.hr_size_}px")
        n_steps = self.n_steps if n_steps is None else n_steps
        lr = self.finetune_learning_rate if learning_rate is None else learning_rate
        rng = RngState(self.random_state).spawn(4)
        self.finetune_curve_ = list(self.finetune_curve_) + run_training(
            [self.net_.params], lambda idx: self._loss(X_hr, up, idx, rng), len(X_hr), n_steps,
            self.batch_size, lr, rng)
        return self

    def predict(self, X_lr, rng=None) -> np.ndarray:
        """Sample one HR image per low-res input (one forked stream each)."""
        check_is_fitted(self, "net_")
        up = self.upsample(X_lr)
        if up.shape[-1] != self.hr_size_:
            raise ShapeError(f"low-res input upsamples to {up.shape[-1]}px, model expects {self.hr_size_}px")
        rng = as_rng(rng, RngState(self.random_state).spawn(2))
        return sample(self.net_, up.shape, self.schedule_, self.sampler_config(),
                      Conditioning.concat_image(up), rng.fork(len(up)))

    def to_checkpoint(self) -> bytes:
        check_is_fitted(self, "net_")
        config = {"params": _json_params(self), "unet": self.unet_config_.to_dict(), "hr_size": self.hr_size_}
        return save_checkpoint(KIND_SR, config, self.net_.params.state_dict())

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> SuperResolution:
        _check_kind(ckpt, KIND_SR)
        est = cls(**ckpt.config["params"])
        est._init_net(ckpt.config["hr_size"])
        est.net_.params.load_state_dict(ckpt.tensors)
        return est
