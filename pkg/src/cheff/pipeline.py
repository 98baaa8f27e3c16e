"""Stage orchestration: training, cascade sampling, reconstruction workflows, inpainting."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from cheff import tensor as T
from cheff.config import PipelineConfig
from cheff.data import IndexFile, SourceDescriptor, build_index, load_index_images, standardize_image
from cheff.diffusion import Conditioning, check_mask, inpaint
from cheff.errors import CheckpointError, ConfigError, DataIOError, ShapeError
from cheff.estimators import LatentAutoencoder, SemanticDiffusion, SuperResolution
from cheff.io import atomic_write, read_pgm, to_model_range, to_unit_range, write_pgm
from cheff.metrics import ImagePair, aggregate, feature_stats, frechet_distance, kernel_mmd, pair_metrics, pixel_features
from cheff.nn.checkpoint import KIND_AE, KIND_SDM, KIND_SR, KIND_TXT, read_checkpoint
from cheff.resize import resize_array
from cheff.rng import RngState
from cheff.schedules import make_schedule, terminal_diagnostic

WORKFLOWS = ("1a", "1b", "2", "3a", "3b")
CHECKPOINT_NAMES = {"ae": "ae.ckpt", "sdm": "sdm.ckpt", "txt": "txt.ckpt", "sr": "sr.ckpt", "sr_fine": "sr_fine.ckpt"}

# child-stream keys under the run seed
_RNG_SDM, _RNG_SR, _RNG_RECON, _RNG_INPAINT, _RNG_PROBE = 10, 11, 12, 13, 14


# -- helpers -----------------------------------------------------------
def git_blob_sha1(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def checkpoint_path(cfg: PipelineConfig, out: Path, stage: str) -> Path:
    configured = getattr(cfg.paths, stage)
    return Path(configured) if configured else Path(out) / CHECKPOINT_NAMES[stage]


def _require(cfg: PipelineConfig, out: Path, stage: str) -> Path:
    path = checkpoint_path(cfg, out, stage)
    if not path.is_file():
        raise CheckpointError(f"stage {stage}: checkpoint not found at {path}")
    return path


def _write_curve(path: Path, curve: Sequence[float]) -> None:
    atomic_write(path, "step,loss\n" + "".join(f"{i},{v:.9g}\n" for i, v in enumerate(curve)))


def _write_images(out: Path, prefix: str, images: np.ndarray) -> list[str]:
    names = []
    for i, img in enumerate(images):
        name = f"{prefix}_{i:03d}.pgm"
        write_pgm(out / name, np.clip(to_unit_range(img[0]), 0.0, 1.0))
        names.append(name)
    return names


def make_ae(cfg: PipelineConfig) -> LatentAutoencoder:
    a = cfg.ae
    return LatentAutoencoder(a.channels, a.latent_channels, a.downsample_factor, a.res_layers, a.kl_weight,
                             a.norm_groups, a.learning_rate, a.steps, a.batch_size, cfg.run.seed)


def make_sdm(cfg: PipelineConfig) -> SemanticDiffusion:
    s, t, sp = cfg.sdm, cfg.text, cfg.sampler
    return SemanticDiffusion(s.base_filters, s.multipliers, s.res_layers, s.attention_resolutions,
                             s.attention_heads, s.norm_groups, s.schedule, s.timesteps, s.beta_start, s.beta_end,
                             t.dim, t.depth, t.heads, t.max_len, s.learning_rate, s.steps, s.batch_size,
                             sp.kind, sp.steps, sp.eta, sp.sigma, cfg.run.seed)


def make_sr(cfg: PipelineConfig) -> SuperResolution:
    r, sp = cfg.sr, cfg.sampler
    return SuperResolution(r.base_filters, r.multipliers, r.res_layers, r.attention_resolutions, r.attention_heads,
                           r.norm_groups, cfg.scale_factor, r.schedule, r.timesteps, 1e-4, 0.02, r.learning_rate,
                           r.finetune_learning_rate, r.steps, r.batch_size, sp.kind, sp.steps, sp.eta, sp.sigma,
                           cfg.run.seed)


def _apply_sampler(est, cfg: PipelineConfig):
    """Sampler settings come from the current config, not the training run."""
    sp = cfg.sampler
    return est.set_params(sampler=sp.kind, sampling_steps=sp.steps, eta=sp.eta, sigma_choice=sp.sigma)


def load_ae(cfg: PipelineConfig, out: Path) -> LatentAutoencoder:
    return LatentAutoencoder.from_checkpoint(read_checkpoint(_require(cfg, out, "ae"), KIND_AE))


def load_sdm(cfg: PipelineConfig, out: Path, need_text: bool = False) -> SemanticDiffusion:
    sdm = read_checkpoint(_require(cfg, out, "sdm"), KIND_SDM)
    txt = None
    if sdm.config.get("conditional") or need_text:
        txt = read_checkpoint(_require(cfg, out, "txt"), KIND_TXT)
    return _apply_sampler(SemanticDiffusion.from_checkpoints(sdm, txt), cfg)


def load_sr(cfg: PipelineConfig, out: Path, stage: str = "sr") -> SuperResolution:
    return _apply_sampler(SuperResolution.from_checkpoint(read_checkpoint(_require(cfg, out, stage), KIND_SR)), cfg)


@dataclass
class Corpus:
    hr: np.ndarray
    lr: np.ndarray
    reports: list[str | None]


def load_corpus(cfg: PipelineConfig, index_path) -> Corpus:
    """HR images standardized from the index; x_LR is their bicubic downsampling."""
    index = IndexFile.load(index_path)
    if not index.records:
        raise DataIOError(f"index {index_path} has no records")
    hr = load_index_images(index, index_path, cfg.images.hr_size)
    lr = resize_array(hr, cfg.images.lr_size, cfg.images.lr_size).astype(np.float32)
    return Corpus(hr, lr, [r.report for r in index.records])


@dataclass
class TrainResult:
    checkpoint: Path
    initial_loss: float
    final_loss: float
    curve: list[float]
    extra: dict = field(default_factory=dict)

    def lines(self) -> list[str]:
        out = [f"checkpoint={self.checkpoint}", f"steps={len(self.curve)}",
               f"initial_loss={self.initial_loss:.6g}", f"final_loss={self.final_loss:.6g}"]
        return out + [f"{k}={v}" for k, v in self.extra.items()]


# -- training ----------------------------------------------------------
def train_ae(cfg: PipelineConfig, index_path, out) -> TrainResult:
    out = Path(out)
    corpus = load_corpus(cfg, index_path)
    ae = make_ae(cfg).fit(corpus.lr)
    path = out / CHECKPOINT_NAMES["ae"]
    atomic_write(path, ae.to_checkpoint())
    _write_curve(out / "ae_loss.csv", ae.loss_curve_)
    return TrainResult(path, ae.initial_loss_, ae.final_loss_, ae.loss_curve_)


def train_sdm(cfg: PipelineConfig, index_path, out, conditional: bool | None = None) -> TrainResult:
    out = Path(out)
    conditional = cfg.sdm.conditional if conditional is None else conditional
    ae = load_ae(cfg, out)
    corpus = load_corpus(cfg, index_path)
    reports = None
    if conditional:
        if not any(corpus.reports):
            raise ConfigError("conditioning requested but the index holds no reports for the text encoder")
        reports = [r or "" for r in corpus.reports]
    mu, std = ae.encode(corpus.lr)
    sdm = make_sdm(cfg).fit(mu, reports, Z_std=std)
    sdm_bytes, txt_bytes = sdm.to_checkpoints()
    path = out / CHECKPOINT_NAMES["sdm"]
    atomic_write(path, sdm_bytes)
    extra = {"latent_scale": f"{sdm.latent_scale_:.6g}", "conditional": str(sdm.conditional_).lower()}
    if txt_bytes is not None:
        atomic_write(out / CHECKPOINT_NAMES["txt"], txt_bytes)
        extra["text_checkpoint"] = out / CHECKPOINT_NAMES["txt"]
    _write_curve(out / "sdm_loss.csv", sdm.loss_curve_)
    return TrainResult(path, sdm.initial_loss_, sdm.final_loss_, sdm.loss_curve_, extra)


def train_sr(cfg: PipelineConfig, index_path, out) -> TrainResult:
    out = Path(out)
    corpus = load_corpus(cfg, index_path)
    sr = make_sr(cfg).fit(corpus.hr, corpus.lr)
    path = out / CHECKPOINT_NAMES["sr"]
    atomic_write(path, sr.to_checkpoint())
    _write_curve(out / "sr_loss.csv", sr.loss_curve_)
    return TrainResult(path, sr.initial_loss_, sr.final_loss_, sr.loss_curve_)


def decoded_lr(ae: LatentAutoencoder, x_lr: np.ndarray) -> np.ndarray:
    """D(E(x_LR)) through the posterior mean."""
    return ae.reconstruct(x_lr)


def finetune_sr(cfg: PipelineConfig, index_path, out, steps: int | None = None) -> TrainResult:
    """Continue SR training with decoded-latent conditioning images."""
    out = Path(out)
    ae = load_ae(cfg, out)
    sr = load_sr(cfg, out, "sr")
    corpus = load_corpus(cfg, index_path)
    if sr.hr_size_ != cfg.images.hr_size or sr.scale_factor != cfg.scale_factor:
        raise ShapeError(f"SR checkpoint is {sr.hr_size_}px at x{sr.scale_factor}, config asks "
                         f"{cfg.images.hr_size}px at x{cfg.scale_factor}")
    cond = decoded_lr(ae, corpus.lr)
    before = sr.evaluate_loss(corpus.hr, cond)
    sr.finetune(corpus.hr, cond, cfg.sr.finetune_steps if steps is None else steps)
    after = sr.evaluate_loss(corpus.hr, cond)
    path = out / CHECKPOINT_NAMES["sr_fine"]
    atomic_write(path, sr.to_checkpoint())
    _write_curve(out / "sr_fine_loss.csv", sr.finetune_curve_)
    return TrainResult(path, before, after, sr.finetune_curve_)


# -- cascade -----------------------------------------------------------
def _sr_stage(cfg: PipelineConfig, out: Path) -> str:
    return "sr_fine" if checkpoint_path(cfg, out, "sr_fine").is_file() else "sr"


def sample_cascade(cfg: PipelineConfig, out, n: int = 4, prompt: str | None = None,
                   keep_intermediate: bool = False) -> dict:
    """noise -> SDM latents -> decoder -> SR, written as PGM files plus a manifest."""
    out = Path(out)
    if n < 1:
        raise ConfigError("n must be >= 1")
    stages = ["ae", "sdm", _sr_stage(cfg, out)]
    ae = load_ae(cfg, out)
    sdm = load_sdm(cfg, out, need_text=prompt is not None)
    if sdm.conditional_:
        stages.append("txt")
    sr = load_sr(cfg, out, stages[2])
    if sr.hr_size_ != cfg.images.hr_size:
        raise ShapeError(f"SR checkpoint produces {sr.hr_size_}px, config asks {cfg.images.hr_size}px")
    root = RngState(cfg.run.seed)
    timings = {}
    t0 = time.perf_counter()
    z = sdm.sample(n, prompt, root.spawn(_RNG_SDM))
    timings["sdm"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    x_lr = np.clip(ae.inverse_transform(z), -1.0, 1.0)
    timings["decode"] = time.perf_counter() - t0
    if x_lr.shape[-1] * sr.scale_factor != sr.hr_size_:
        raise ShapeError(f"decoded {x_lr.shape[-1]}px images do not fit SR input of {sr.hr_size_ // sr.scale_factor}px")
    t0 = time.perf_counter()
    x_hr = np.clip(sr.predict(x_lr, root.spawn(_RNG_SR)), -1.0, 1.0)
    timings["sr"] = time.perf_counter() - t0
    outputs = _write_images(out, "sample", x_hr)
    intermediates = _write_images(out, "lr", x_lr) if keep_intermediate else []
    manifest = {
        "command": "sample",
        "seed": cfg.run.seed,
        "n": n,
        "prompt": prompt,
        "config": cfg.to_dict(),
        "checkpoints": {s: {"path": str(checkpoint_path(cfg, out, s)),
                            "sha1": git_blob_sha1(checkpoint_path(cfg, out, s).read_bytes())} for s in stages},
        "outputs": outputs,
        "intermediates": intermediates,
        "wall_time_s": timings,
    }
    atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def manifest_fingerprint(manifest: dict) -> dict:
    """Manifest without the wall-clock fields, for run-to-run comparison."""
    return {k: v for k, v in manifest.items() if k != "wall_time_s"}


# -- reconstruction workflows ------------------------------------------
@dataclass
class ReconstructionReport:
    workflow: str
    per_image: list
    mean: object

    def lines(self) -> list[str]:
        m = self.mean
        return [f"workflow={self.workflow}", f"n={len(self.per_image)}", f"mse={m.mse:.6g}",
                f"psnr_db={m.psnr_db:.6g}", f"ssim={m.ssim:.6g}"]


def run_workflow(workflow: str, x_hr: np.ndarray, x_lr: np.ndarray, ae: LatentAutoencoder | None,
                 sr: SuperResolution | None, rng: RngState) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(reference, reconstruction)`` in [-1, 1] for one workflow.

    1a/1b: x_HR -> bicubic -> E -> D -> SR;  2: x_LR -> E -> D;  3a/3b: x_HR -> bicubic -> SR.
    """
    if workflow not in WORKFLOWS:
        raise ConfigError(f"unknown workflow {workflow!r}; expected one of {', '.join(WORKFLOWS)}")
    if workflow == "2":
        return x_lr, np.clip(ae.reconstruct(x_lr), -1.0, 1.0)
    cond = x_lr
    if workflow.startswith("1"):
        cond = np.clip(ae.reconstruct(x_lr), -1.0, 1.0)
    return x_hr, np.clip(sr.predict(cond, rng), -1.0, 1.0)


def reconstruct(cfg: PipelineConfig, index_path, workflow: str, out, limit: int | None = None) -> ReconstructionReport:
    out = Path(out)
    if workflow not in WORKFLOWS:
        raise ConfigError(f"unknown workflow {workflow!r}; expected one of {', '.join(WORKFLOWS)}")
    needs = {"1a": ("ae", "sr"), "1b": ("ae", "sr_fine"), "2": ("ae",), "3a": ("sr",), "3b": ("sr_fine",)}[workflow]
    ae = load_ae(cfg, out) if "ae" in needs else None
    sr_stage = next((s for s in needs if s.startswith("sr")), None)
    sr = load_sr(cfg, out, sr_stage) if sr_stage else None
    corpus = load_corpus(cfg, index_path)
    hr, lr = corpus.hr, corpus.lr
    if limit is not None:
        hr, lr = hr[:limit], lr[:limit]
    ref, rec = run_workflow(workflow, hr, lr, ae, sr, RngState(cfg.run.seed).spawn(_RNG_RECON))
    per_image = [pair_metrics(ImagePair(np.clip(to_unit_range(a[0]), 0, 1), np.clip(to_unit_range(b[0]), 0, 1)))
                 for a, b in zip(ref, rec)]
    report = ReconstructionReport(workflow, per_image, aggregate(per_image))
    rows = "".join(f"{i},{m.mse:.9g},{m.psnr_db:.9g},{m.ssim:.9g}\n" for i, m in enumerate(per_image))
    atomic_write(out / f"reconstruct_{workflow}.csv", "image,mse,psnr_db,ssim\n" + rows)
    return report


# -- inpainting --------------------------------------------------------
def read_mask(path, shape) -> np.ndarray:
    mask = read_pgm(path)
    if mask.shape != tuple(shape):
        raise ShapeError(f"mask {path} is {mask.shape}, image is {tuple(shape)}")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ValueError(f"mask {path} is not binary (use 0 and the maximum value only)")
    return mask.astype(np.float32)


def nearest_downsample(mask: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour resampling of a mask by an integer factor (block centres)."""
    h, w = mask.shape[-2:]
    if h % factor or w % factor:
        raise ShapeError(f"mask {h}x{w} not divisible by {factor}")
    return mask[..., factor // 2::factor, factor // 2::factor]


def pixel_inpaint(sr: SuperResolution, x_known: np.ndarray, mask: np.ndarray, rng: RngState) -> np.ndarray:
    """Diffusion inpainting in HR pixel space with the SR denoiser.

    The conditioning image is the masked input pushed through the SR
    bicubic down/up path, so it carries no information from the masked region.
    """
    x_known = np.asarray(x_known, dtype=np.float32)
    keep = check_mask(mask, x_known.shape).astype(np.float32)
    lr = sr.downsample(x_known * (1.0 - keep))
    cond = Conditioning.concat_image(sr.upsample(lr))
    return inpaint(sr.net_, x_known, mask, sr.schedule_, sr.sampler_config(), cond, rng)


def latent_inpaint(ae: LatentAutoencoder, sdm: SemanticDiffusion, sr: SuperResolution, x_hr: np.ndarray,
                   mask: np.ndarray, rng: RngState, prompt: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Inpaint E(x_LR) with the latent prior, decode, then super-resolve.

    Returns ``(x_LR, x_HR)``.  The final composite is taken with the
    unscaled posterior mean so a zero mask reproduces D(E(x_LR)) exactly.
    """
    x_hr = np.asarray(x_hr, dtype=np.float32)
    lr_size = x_hr.shape[-1] // sr.scale_factor
    x_lr = resize_array(x_hr, lr_size, lr_size).astype(np.float32)
    mu = ae.transform(x_lr)
    lat_mask = nearest_downsample(np.asarray(mask), x_hr.shape[-1] // mu.shape[-1])
    lat_mask = np.broadcast_to(lat_mask, mu.shape).copy()
    check_mask(lat_mask, mu.shape)
    cond = Conditioning.none()
    if sdm.conditional_:
        with T.no_grad():
            cond = sdm._condition(sdm.tokens_for([prompt or ""] * len(mu)))
    elif prompt is not None:
        raise ValueError("a prompt needs a model trained with a text encoder")
    scale = np.float32(sdm.latent_scale_)
    z = inpaint(sdm.net_, mu * scale, lat_mask, sdm.schedule_, sdm.sampler_config(), cond, rng.spawn(0))
    z = np.where(lat_mask.astype(bool), z / scale, mu)
    x_lr_out = np.clip(ae.inverse_transform(z), -1.0, 1.0)
    x_hr_out = np.clip(sr.predict(x_lr_out, rng.spawn(1)), -1.0, 1.0)
    return x_lr_out, x_hr_out


def inpaint_cmd(cfg: PipelineConfig, image_path, mask_path, space: str, out, prompt: str | None = None) -> dict:
    out = Path(out)
    if space not in ("pixel", "latent"):
        raise ConfigError(f"unknown inpainting space {space!r}")
    size = cfg.images.hr_size
    x = to_model_range(standardize_image(read_pgm(image_path), size)).astype(np.float32)[None]
    mask = read_mask(mask_path, (size, size))[None, None]
    rng = RngState(cfg.run.seed).spawn(_RNG_INPAINT)
    result = {"space": space}
    if space == "pixel":
        sr = load_sr(cfg, out, _sr_stage(cfg, out))
        y = pixel_inpaint(sr, x, np.broadcast_to(mask, x.shape), rng)
        result["output"] = _write_images(out, "inpainted", y)[0]
    else:
        ae, sdm = load_ae(cfg, out), load_sdm(cfg, out, need_text=prompt is not None)
        sr = load_sr(cfg, out, _sr_stage(cfg, out))
        x_lr, y = latent_inpaint(ae, sdm, sr, x, mask[0, 0], rng, prompt)
        result["output"] = _write_images(out, "inpainted", y)[0]
        result["lr_output"] = _write_images(out, "inpainted_lr", x_lr)[0]
    result["masked_fraction"] = f"{float(mask.mean()):.6g}"
    return result


# -- schedule diagnostic -----------------------------------------------
def diagnose_schedule(cfg: PipelineConfig, out, threshold: float | None = None, beta_end: float | None = None,
                      probe=None) -> list[tuple[str, str]]:
    """Terminal-noise report for the SDM schedule, as ordered ``(key, value)`` pairs."""
    s = cfg.sdm
    beta_end = s.beta_end if beta_end is None else beta_end
    threshold = s.terminal_threshold if threshold is None else threshold
    schedule = make_schedule(s.schedule, s.timesteps, s.beta_start, beta_end)
    diag = terminal_diagnostic(schedule, threshold)
    report = [("schedule", s.schedule), ("timesteps", str(s.timesteps)), ("beta_start", f"{s.beta_start:g}"),
              ("beta_end", f"{beta_end:g}"), ("alpha_bar_T", f"{diag.alpha_bar_T:.6e}"),
              ("residual_signal", f"{diag.residual_signal:.6e}"), ("threshold", f"{diag.threshold:g}"),
              ("sufficient", str(diag.sufficient).lower())]
    if probe is not None:
        out = Path(out)
        ae = load_ae(cfg, out)
        lr = cfg.images.lr_size
        x = to_model_range(standardize_image(read_pgm(probe), lr)).astype(np.float32)[None]
        mu = ae.transform(x)
        eps = RngState(cfg.run.seed).spawn(_RNG_PROBE).normal(mu.shape, dtype=mu.dtype)
        ab = np.float32(diag.alpha_bar_T)
        z_T = np.sqrt(ab) * mu + np.sqrt(np.float32(1) - ab) * eps
        decoded = np.clip(ae.inverse_transform(z_T), -1.0, 1.0)
        report.append(("probe_output", _write_images(out, "probe_terminal", decoded)[0]))
    return report


# -- metrics and index -------------------------------------------------
def _pgm_dir(path) -> dict[str, Path]:
    path = Path(path)
    if not path.is_dir():
        raise DataIOError(f"not a directory: {path}")
    return {p.name: p for p in sorted(path.glob("*.pgm"))}


def metrics_cmd(reference_dir, candidate_dir, mode: str = "pairwise") -> list[tuple[str, str]]:
    ref, cand = _pgm_dir(reference_dir), _pgm_dir(candidate_dir)
    if mode == "pairwise":
        if set(ref) != set(cand):
            raise DataIOError(f"directories hold different files: {sorted(set(ref) ^ set(cand))[:5]}")
        if not ref:
            raise DataIOError("no PGM images to compare")
        per_image = [pair_metrics(ImagePair(read_pgm(ref[k]), read_pgm(cand[k]))) for k in ref]
        m = aggregate(per_image)
        return [("n", str(len(per_image))), ("mse", f"{m.mse:.6g}"), ("psnr_db", f"{m.psnr_db:.6g}"),
                ("ssim", f"{m.ssim:.6g}")]
    if mode == "distribution":
        fa = pixel_features([read_pgm(p) for p in ref.values()])
        fb = pixel_features([read_pgm(p) for p in cand.values()])
        return [("n_reference", str(len(fa))), ("n_candidate", str(len(fb))),
                ("frechet", f"{frechet_distance(feature_stats(fa), feature_stats(fb)):.6g}"),
                ("mmd2", f"{kernel_mmd(fa, fb):.6g}")]
    raise ConfigError(f"unknown metrics mode {mode!r}")


def build_index_cmd(sources: Sequence[str], output) -> IndexFile:
    descriptors = []
    for text in sources:
        try:
            descriptors.append(SourceDescriptor.parse(text))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    names = [d.name for d in descriptors]
    if len(set(names)) != len(names):
        raise ConfigError("source names must be unique")
    return build_index(descriptors, output)

