"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the summary lines.
Criteria 5 and 6 share one toy training run through ``cheffctl`` (about
ten minutes on a single CPU core).
"""

import contextlib
import io
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from cheff import pipeline
from cheff.cli import main
from cheff.config import load_config
from cheff.data import (BOS, EOS, SourceDescriptor, Vocabulary, build_index, extract_report_sections,
                        standardize_image, tokenize)
from cheff.diffusion import (Conditioning, SamplerConfig, ddim_sigma, ddpm_sigma, ddpm_step, inpaint, q_sample,
                             sample, training_loss)
from cheff.estimators import SuperResolution
from cheff.io import read_pgm
from cheff.metrics import (ImagePair, feature_stats, frechet_distance, kernel_mmd, mse, psnr, psnr_from_mse,
                           ssim)
from cheff.rng import RngState
from cheff.schedules import linear_schedule
from cheff.synthetic import make_corpus
from grad_cases import BLOCK_CASES, op_cases
from metric_oracles import naive_mmd2, scipy_frechet
from report_fixtures import REPORT_FIXTURES

TOY_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "toy.cfg"

# frozen from the reference run (docs/reference_run.md)
AE_LOSS_RATIO = 0.5
SDM_FINAL_LOSS = 0.7
SR_LOSS_RATIO = 0.7


SUMMARY: dict[int, str] = {}


def report(number: int, ok: bool, detail: str) -> None:
    line = f"[criterion {number}] {'PASS' if ok else 'FAIL'}: {detail}"
    SUMMARY[number] = line
    print("\n" + line)


# -- 1 ---------------------------------------------------------------------
def test_criterion_1_schedule_algebra():
    start = time.perf_counter()
    low = float(linear_schedule(1e-4, 0.0195, 1000).alpha_bar(1000))
    high = float(linear_schedule(1e-4, 0.0295, 1000).alpha_bar(1000))
    elapsed = time.perf_counter() - start
    ok = 4e-5 <= low <= 6e-5 and 2e-7 <= high <= 5e-7 and high < low and elapsed < 1.0
    report(1, ok, f"abar_T(0.0195)={low:.4e} abar_T(0.0295)={high:.4e} in {elapsed:.3f}s")
    assert ok


# -- 2 ---------------------------------------------------------------------
def _oracle_reconstruction_error(T_: int, seed: int) -> float:
    s = linear_schedule(1e-4, 0.05, T_)
    g = np.random.default_rng(seed)
    x0 = g.uniform(-1, 1, (4, 1, 8, 8))
    x = q_sample(x0, T_, g.standard_normal(x0.shape), s)
    for t in range(T_, 0, -1):
        abar = s.alpha_bar(t)
        eps_hat = (x - np.sqrt(abar) * x0) / np.sqrt(1 - abar)
        x = ddpm_step(x, t, eps_hat, s, SamplerConfig.ddpm(clip_x0=False), noise=None)
    return float(np.max(np.abs(x - x0)))


def test_criterion_2_sampler_identities():
    start = time.perf_counter()
    err_a = max(_oracle_reconstruction_error(T_, seed) for seed, T_ in enumerate((1, 2, 10, 50, 100)))
    s = linear_schedule(1e-4, 0.02, 1000)
    plan = SamplerConfig.ddim(1000, 1000, eta=1.0).plan
    err_b = max(abs(ddim_sigma(s, a, b, 1.0) - float(ddpm_sigma(s, a, "beta_tilde")))
                for a, b in plan.transitions())
    covered = sorted(a for a, _ in plan.transitions()) == list(range(1, 1001))

    def den(x, t, cond):
        return x * np.float32(0.3) + np.float32(0.05)

    cfg = SamplerConfig.ddim(1000, 150, eta=0.0)
    runs = [sample(den, (2, 3, 8, 8), s, cfg, rng=RngState(17)).tobytes() for _ in range(2)]
    det = runs[0] == runs[1]
    elapsed = time.perf_counter() - start
    ok = err_a < 1e-4 and err_b < 1e-10 and covered and det and elapsed < 10
    report(2, ok, f"(a) max|x-x0|={err_a:.2e} (b) max sigma gap={err_b:.2e} over 1000 t "
                  f"(c) bit-identical={det} in {elapsed:.2f}s")
    assert ok


# -- 3 ---------------------------------------------------------------------
def test_criterion_3_gradient_suite():
    start = time.perf_counter()
    worst = {}
    for name, case in list(op_cases().items()) + list(BLOCK_CASES.items()):
        try:
            result = case()
            worst[name] = max(result.values()) if isinstance(result, dict) else \
                (max(result) if isinstance(result, (list, tuple)) else float(result))
        except AssertionError:
            worst[name] = math.inf
    elapsed = time.perf_counter() - start
    failed = sorted(k for k, v in worst.items() if not v < 1e-4)
    ok = not failed and set(BLOCK_CASES) <= set(worst) and elapsed < 120
    report(3, ok, f"{len(worst)} cases, worst rel err {max(worst.values()):.2e}, failed={failed} in {elapsed:.1f}s")
    assert ok


# -- 4 ---------------------------------------------------------------------
def test_criterion_4_zero_init_loss():
    start = time.perf_counter()
    cfg = load_config(TOY_CONFIG)
    results = []
    sdm = pipeline.make_sdm(cfg)
    sdm._init_nets((cfg.ae.latent_channels, 8, 8), None)
    x0 = np.random.default_rng(0).standard_normal((32, cfg.ae.latent_channels, 8, 8)).astype(np.float32)
    loss = float(training_loss(x0, sdm.net_, sdm.schedule_, None, RngState(1)).data)
    results.append(("sdm", loss, x0.size))
    sr = pipeline.make_sr(cfg)
    sr._init_net(cfg.images.hr_size)
    hr = np.random.default_rng(2).uniform(-1, 1, (2, 1, 128, 128)).astype(np.float32)
    cond = Conditioning.concat_image(sr.upsample(sr.downsample(hr)))
    loss = float(training_loss(hr, sr.net_, sr.schedule_, cond, RngState(3)).data)
    results.append(("sr", loss, hr.size))
    elapsed = time.perf_counter() - start
    ok = all(abs(v - 1.0) <= 3 * math.sqrt(2 / n) for _, v, n in results) and elapsed < 5
    report(4, ok, " ".join(f"{k}: loss={v:.4f} tol={3 * math.sqrt(2 / n):.4f}" for k, v, n in results)
           + f" in {elapsed:.2f}s")
    assert ok


# -- 5 and 6 share a toy run ---------------------------------------------------
@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    out = root / "out"
    roots = make_corpus(root / "corpus", n=200, size=128, seed=0)
    argv = ["--config", str(TOY_CONFIG), "--out", str(out)]
    start = time.perf_counter()
    codes = [main(argv + ["build-index"] + [f"--source={k}={v}" for k, v in roots.items()])]
    stages = {}
    for stage in ("ae", "sdm", "sr"):
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            codes.append(main(argv + [f"train-{stage}", "--index", str(out / "index.json")]))
        stages[stage] = dict(line.split("=", 1) for line in buf.getvalue().splitlines() if "=" in line)
    return {"out": out, "codes": codes, "stages": stages, "argv": argv,
            "train_time": time.perf_counter() - start}


def test_criterion_5_toy_training(toy_run):
    ok = toy_run["codes"] == [0, 0, 0, 0]
    details = []
    if ok:
        loss = {k: (float(v["initial_loss"]), float(v["final_loss"]), int(v["steps"]))
                for k, v in toy_run["stages"].items()}
        (ae0, ae1, ae_n), (sdm0, sdm1, sdm_n), (sr0, sr1, sr_n) = loss["ae"], loss["sdm"], loss["sr"]
        ok = (ae_n == 300 and ae1 <= AE_LOSS_RATIO * ae0 and sdm_n == 500 and sdm1 < SDM_FINAL_LOSS
              and sr_n == 500 and sr1 <= SR_LOSS_RATIO * sr0 and toy_run["train_time"] < 15 * 60)
        details = [f"ae {ae0:.4g}->{ae1:.4g}", f"sdm {sdm0:.4g}->{sdm1:.4g}", f"sr {sr0:.4g}->{sr1:.4g}"]
    report(5, ok, ", ".join(details) + f" exit codes {toy_run['codes']} train time {toy_run['train_time']:.0f}s")
    assert ok


def test_criterion_6_cascade(toy_run, capsys):
    out, argv = toy_run["out"], toy_run["argv"]
    runs = []
    for _ in range(2):
        code = main(argv + ["--seed", "11", "sample", "--n", "4"])
        files = {f"sample_{i:03d}.pgm": (out / f"sample_{i:03d}.pgm").read_bytes() for i in range(4)} \
            if code == 0 else {}
        manifest = json.loads((out / "manifest.json").read_text()) if code == 0 else {}
        runs.append((code, files, pipeline.manifest_fingerprint(manifest)))
    valid = runs[0][0] == 0 and all(read_pgm(out / name).shape == (128, 128) for name in runs[0][1])
    valid = valid and all(data.startswith(b"P5") for data in runs[0][1].values()) and len(runs[0][1]) == 4
    identical = runs[0] == runs[1]
    capsys.readouterr()
    flags = {}
    for beta_end in ("0.0195", "0.0295"):
        main(["--out", str(out), "diagnose-schedule", "--beta-end", beta_end, "--threshold", "1e-5"])
        lines = dict(line.split("=", 1) for line in capsys.readouterr().out.splitlines())
        flags[beta_end] = lines["sufficient"]
    diag_ok = flags == {"0.0195": "false", "0.0295": "true"}
    ok = valid and identical and diag_ok
    report(6, ok, f"4 valid 128x128 PGMs={valid} bit-identical={identical} diagnose={flags}")
    assert ok


# -- 7 ---------------------------------------------------------------------
@pytest.fixture(scope="module")
def inpaint_model():
    sr = SuperResolution(base_filters=8, multipliers=(1, 2), attention_resolutions=(8,), norm_groups=4,
                         scale_factor=4, timesteps=100, sampling_steps=10, random_state=5)
    sr._init_net(16)
    g = np.random.default_rng(6)
    for _, p in sr.net_.params.items():  # untrained weights, but with a non-trivial output head
        p.data[...] = p.data + 0.05 * g.standard_normal(p.shape).astype(p.data.dtype)
    return sr


def test_criterion_7_inpainting(inpaint_model):
    sr = inpaint_model
    g = np.random.default_rng(7)
    x = g.uniform(-1, 1, (100, 1, 16, 16)).astype(np.float32)
    masks = (g.random((100, 1, 16, 16)) < g.uniform(0.05, 0.95, (100, 1, 1, 1))).astype(np.float32)
    rngs = RngState(8).fork(100)
    y = pipeline.pixel_inpaint(sr, x, masks, rngs)
    keep = masks == 0
    preserved = all(y[i][keep[i]].tobytes() == x[i][keep[i]].tobytes() for i in range(100))
    changed = bool(np.any(y[masks == 1] != x[masks == 1]))
    zero = pipeline.pixel_inpaint(sr, x[:4], np.zeros_like(x[:4]), RngState(9))
    identity = zero.tobytes() == x[:4].tobytes()
    coupled = []
    for cfg in (SamplerConfig.ddim(100, 10, eta=0.0), SamplerConfig.ddpm()):
        full = inpaint(sr.net_, x[:4], np.ones_like(x[:4]), sr.schedule_, cfg,
                                Conditioning.concat_image(sr.upsample(sr.downsample(np.zeros_like(x[:4])))),
                                RngState(10))
        ref = sample(sr.net_, x[:4].shape, sr.schedule_, cfg,
                     Conditioning.concat_image(sr.upsample(sr.downsample(np.zeros_like(x[:4])))), RngState(10))
        coupled.append(full.tobytes() == ref.tobytes())
    via_pipeline = pipeline.pixel_inpaint(sr, x[:4], np.ones_like(x[:4]), RngState(11))
    ref = sample(sr.net_, x[:4].shape, sr.schedule_, sr.sampler_config(),
                 Conditioning.concat_image(sr.upsample(sr.downsample(np.zeros_like(x[:4])))), RngState(11))
    coupled.append(via_pipeline.tobytes() == ref.tobytes())
    ok = preserved and changed and identity and all(coupled)
    report(7, ok, f"100 masks preserved={preserved} (masked region resampled={changed}) zero-mask identity="
                  f"{identity} full-mask == unconditional {coupled}")
    assert ok


# -- 8 ---------------------------------------------------------------------
def test_criterion_8_metrics():
    g = np.random.default_rng(12)
    psnr_ok, ssim_ok = True, True
    for _ in range(50):
        a, b = g.random((16, 16)), g.random((16, 16))
        pair = ImagePair(a, b)
        psnr_ok &= psnr(pair) == 10 * math.log10(1 / mse(pair))
        ssim_ok &= abs(ssim(ImagePair(a, a)) - 1.0) < 1e-12
    fd_err, mmd_err = 0.0, 0.0
    for n, m in ((10, 10), (25, 40), (50, 50), (50, 12), (2, 3)):
        x, y = g.standard_normal((n, 8)), 1.3 * g.standard_normal((m, 8)) + 0.4
        mmd_err = max(mmd_err, abs(kernel_mmd(x, y) - naive_mmd2(x, y)))
        if min(n, m) >= 10:
            sa, sb = feature_stats(x), feature_stats(y)
            ref = scipy_frechet(sa.mean, sa.cov, sb.mean, sb.cov)
            fd_err = max(fd_err, abs(frechet_distance(sa, sb) - ref) / max(1.0, abs(ref)))
    row1 = psnr_from_mse(0.0039)
    row2 = psnr_from_mse(0.0005)
    table_ok = abs(row1 - 24.05) < 0.1 and abs(row2 - 36.80) > 3.0
    ok = psnr_ok and ssim_ok and fd_err < 1e-10 and mmd_err < 1e-10 and table_ok
    report(8, ok, f"psnr exact={psnr_ok} ssim(x,x)=1 {ssim_ok} frechet err={fd_err:.1e} mmd err={mmd_err:.1e} "
                  f"psnr(0.0039)={row1:.2f} within 0.1 of 24.05, psnr(0.0005)={row2:.2f} far from 36.80")
    assert ok


# -- 9 ---------------------------------------------------------------------
def test_criterion_9_data_pipeline(tmp_path):
    g = np.random.default_rng(13)
    geometry_ok = True
    for _ in range(500):
        h, w, target = int(g.integers(1, 300)), int(g.integers(1, 300)), int(g.integers(1, 96))
        out = standardize_image(g.random((h, w)), target)
        geometry_ok &= out.shape == (1, target, target) and bool(np.all(np.isfinite(out)))
    roots = make_corpus(tmp_path / "corpus", n=30, size=20, seed=4)
    sources = [SourceDescriptor(k, v) for k, v in roots.items()]
    build_index(sources, tmp_path / "one.json")
    build_index(list(reversed(sources)), tmp_path / "two.json")
    first = (tmp_path / "one.json").read_bytes()
    build_index(sources, tmp_path / "one.json")
    index_ok = first == (tmp_path / "two.json").read_bytes() == (tmp_path / "one.json").read_bytes()
    vocab = Vocabulary.build(["clear lungs ."])
    ids = tokenize(vocab, " ".join(["clear lungs ."] * 100))
    short = tokenize(vocab, "clear")
    token_ok = len(ids) == 150 and ids[0] == BOS and ids[-1] == EOS and short[0] == BOS and short[-1] == EOS
    fixtures_ok = len(REPORT_FIXTURES) == 20 and all(extract_report_sections(t) == e for t, e in REPORT_FIXTURES)
    ok = geometry_ok and index_ok and token_ok and fixtures_ok
    report(9, ok, f"500 geometries={geometry_ok} index byte-deterministic={index_ok} tokenizer={token_ok} "
                  f"20 report fixtures={fixtures_ok}")
    assert ok
