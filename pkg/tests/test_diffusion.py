import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cheff import tensor as T
from cheff.diffusion import (Conditioning, SamplerConfig, ddim_sigma, ddim_step, ddpm_sigma, ddpm_step, inpaint,
                             outpaint, predict_x0, q_sample, reverse_process, sample, training_loss)
from cheff.errors import ShapeError
from cheff.rng import RngState
from cheff.schedules import linear_schedule
from cheff.tensor import Tensor
from gradcheck_util import check_grads


def gaussian_denoiser(s, mu, var):
    """Exact E[eps | x_t] when x0 ~ N(mu, var·I)."""

    def den(x, t, cond):
        abar = s.alpha_bar(t).reshape((-1,) + (1,) * (x.ndim - 1))
        eps = np.sqrt(1 - abar) * (x.data - np.sqrt(abar) * mu) / (abar * var + 1 - abar)
        return Tensor(eps.astype(x.dtype))

    return den


def zero_denoiser(x, t, cond):
    return Tensor(np.zeros_like(x.data))


# -- forward process -----------------------------------------------------
def test_q_sample_trivial_cases():
    s = linear_schedule(1e-4, 0.02, 100)
    x0 = np.random.default_rng(0).standard_normal((2, 3))
    np.testing.assert_allclose(q_sample(x0, 40, np.zeros_like(x0), s), np.sqrt(s.alpha_bar(40)) * x0)
    eps = np.ones((2, 3))
    np.testing.assert_allclose(q_sample(np.zeros((2, 3)), 40, eps, s), np.sqrt(1 - s.alpha_bar(40)) * eps)
    with pytest.raises(ValueError):
        q_sample(x0, 0, eps, s)
    with pytest.raises(ValueError):
        q_sample(x0, 101, eps, s)
    with pytest.raises(ShapeError):
        q_sample(x0, 5, np.ones(3), s)


def test_q_sample_monte_carlo_moments():
    s = linear_schedule(1e-4, 0.02, 1000)
    t, n = 300, 100_000
    x0 = np.array([0.8, -0.3])
    eps = np.random.default_rng(1).standard_normal((n, 2))
    xt = q_sample(np.broadcast_to(x0, (n, 2)), t, eps, s)
    abar = s.alpha_bar(t)
    sd = np.sqrt(1 - abar)
    assert np.all(np.abs(xt.mean(0) - np.sqrt(abar) * x0) < 3 * sd / np.sqrt(n))
    np.testing.assert_allclose(xt.var(0), 1 - abar, rtol=0.02)


def test_q_sample_per_sample_timesteps():
    s = linear_schedule(1e-4, 0.02, 10)
    x0, eps = np.ones((3, 2)), np.zeros((3, 2))
    out = q_sample(x0, np.array([1, 5, 10]), eps, s)
    np.testing.assert_allclose(out[:, 0], np.sqrt(s.alpha_bar(np.array([1, 5, 10]))))


# -- training objective --------------------------------------------------
def test_training_loss_oracle_and_zero_denoiser():
    s = linear_schedule(1e-4, 0.02, 50)
    x0 = np.random.default_rng(2).standard_normal((16, 1, 8, 8))
    rng = RngState(3)
    t = rng.copy().integers(1, 51, size=16)

    def oracle(x, tt, cond):
        abar = s.alpha_bar(tt).reshape(-1, 1, 1, 1)
        return Tensor((x.data - np.sqrt(abar) * x0) / np.sqrt(1 - abar))

    assert float(training_loss(x0, oracle, s, None, RngState(3)).data) == pytest.approx(0.0, abs=1e-9)
    n = x0.size
    loss = float(training_loss(x0, zero_denoiser, s, None, rng).data)
    assert abs(loss - 1.0) < 3 * np.sqrt(2 / n)
    assert t.shape == (16,)


def test_training_loss_rejects_bad_shapes():
    s = linear_schedule(1e-4, 0.02, 10)
    with pytest.raises(ShapeError):
        training_loss(np.zeros((0, 2)), zero_denoiser, s, None, RngState(0))
    with pytest.raises(ShapeError):
        training_loss(np.zeros((2, 3)), lambda x, t, c: Tensor(np.zeros((2, 2))), s, None, RngState(0))


def test_training_loss_gradient_two_layer_denoiser():
    s = linear_schedule(1e-4, 0.02, 20)
    x0 = np.random.default_rng(4).standard_normal((3, 5))

    def loss(w1, w2):
        def den(x, t, cond):
            tt = Tensor((t / 20.0)[:, None])
            return T.matmul(T.tanh(T.matmul(x, w1) + tt), w2)

        return training_loss(x0, den, s, None, RngState(5))

    r = np.random.default_rng(6)
    check_grads(loss, r.standard_normal((5, 4)) * 0.5, r.standard_normal((4, 5)) * 0.5)


# -- reverse steps -------------------------------------------------------
def test_ddpm_step_single_step_recovers_x0():
    s = linear_schedule(0.3, 0.3, 1)
    x0 = np.random.default_rng(7).standard_normal(6)
    eps = np.random.default_rng(8).standard_normal(6)
    x1 = q_sample(x0, 1, eps, s)
    np.testing.assert_allclose(ddpm_step(x1, 1, eps, s), x0, atol=1e-12)


def test_ddpm_step_tiny_beta_is_near_identity():
    s = linear_schedule(1e-9, 1e-9, 3)
    x = np.random.default_rng(0).standard_normal(4)
    np.testing.assert_allclose(ddpm_step(x, 2, np.ones(4) * 0.1, s), x, atol=1e-5)


def test_ddpm_step_contract():
    s = linear_schedule(1e-4, 0.02, 10)
    with pytest.raises(ValueError):
        ddpm_step(np.zeros(2), 1, np.zeros(2), s, noise=np.ones(2))
    with pytest.raises(ValueError):
        ddpm_step(np.zeros(2), 11, np.zeros(2), s)
    np.testing.assert_allclose(ddpm_sigma(s, 5, "beta"), np.sqrt(s.beta(5)))


def test_clipped_ddpm_mean_equals_textbook_when_x0_in_range():
    s = linear_schedule(1e-4, 0.02, 50)
    x0 = np.random.default_rng(0).uniform(-0.9, 0.9, 10)
    eps = np.random.default_rng(1).standard_normal(10)
    xt = q_sample(x0, 30, eps, s)
    a = ddpm_step(xt, 30, eps, s, SamplerConfig.ddpm(clip_x0=True))
    b = ddpm_step(xt, 30, eps, s, SamplerConfig.ddpm(clip_x0=False))
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_ddim_single_jump_recovers_x0():
    s = linear_schedule(1e-4, 0.02, 100)
    x0 = np.random.default_rng(0).standard_normal(8)
    eps = np.random.default_rng(1).standard_normal(8)
    np.testing.assert_allclose(ddim_step(q_sample(x0, 100, eps, s), 100, 0, eps, s), x0, atol=1e-5)
    np.testing.assert_allclose(predict_x0(q_sample(x0, 37, eps, s), 37, eps, s), x0, atol=1e-10)


def test_ddim_eta0_is_bit_deterministic():
    s = linear_schedule(1e-4, 0.02, 100)
    x = np.random.default_rng(0).standard_normal(8).astype(np.float32)
    e = np.random.default_rng(1).standard_normal(8).astype(np.float32)
    assert ddim_step(x, 50, 20, e, s).tobytes() == ddim_step(x.copy(), 50, 20, e.copy(), s).tobytes()
    with pytest.raises(ValueError):
        ddim_step(x, 20, 50, e, s)
    with pytest.raises(ValueError):
        ddim_step(x, 50, 20, e, s, eta=2.0)


def test_ddim_eta1_consecutive_matches_ddpm_coefficients():
    s = linear_schedule(1e-4, 0.02, 1000)
    for t in range(1, 1001):
        assert ddim_sigma(s, t, t - 1, 1.0) == pytest.approx(float(np.sqrt(s.beta_tilde(t))), abs=1e-10)
    # the means agree too
    x = np.random.default_rng(0).standard_normal(5)
    e = np.random.default_rng(1).standard_normal(5)
    for t in (2, 100, 999):
        np.testing.assert_allclose(ddim_step(x, t, t - 1, e, s, 1.0), ddpm_step(x, t, e, s), atol=1e-10)


# -- sampling ------------------------------------------------------------
def test_sample_is_reproducible_and_needs_rng():
    s = linear_schedule(1e-4, 0.05, 50)
    den = gaussian_denoiser(s, 0.3, 0.2)
    cfg = SamplerConfig.ddim(50, 10, eta=0.5)
    a = sample(den, (2, 1, 4, 4), s, cfg, rng=RngState(9))
    b = sample(den, (2, 1, 4, 4), s, cfg, rng=RngState(9))
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        sample(den, (2, 3), s, cfg)
    with pytest.raises(ShapeError):
        sample(den, (0, 3), s, cfg, rng=RngState(0))


def test_sample_mean_of_gaussian_toy_data():
    s = linear_schedule(1e-4, 0.05, 200)
    mu, var = 0.4, 0.05
    out = sample(gaussian_denoiser(s, mu, var), (256, 1, 8, 8), s, SamplerConfig.ddpm(clip_x0=False),
                 rng=RngState(10), dtype=np.float64)
    assert abs(out.mean() - mu) < 0.1
    assert abs(out.var() - var) < 0.02


def test_full_plan_ddim_eta1_tracks_ddpm_with_coupled_noise():
    s = linear_schedule(1e-4, 0.05, 100)
    den = gaussian_denoiser(s, 0.1, 0.3)
    a = sample(den, (3, 4), s, SamplerConfig.ddpm(clip_x0=False), rng=RngState(11), dtype=np.float64)
    b = sample(den, (3, 4), s, SamplerConfig.ddim(100, 100, eta=1.0, clip_x0=False), rng=RngState(11),
               dtype=np.float64)
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_ddpm_eps_oracle_without_noise_reconstructs_x0():
    s = linear_schedule(1e-4, 0.05, 100)
    x0 = np.random.default_rng(0).uniform(-1, 1, (2, 6))
    eps = np.random.default_rng(1).standard_normal((2, 6))
    x = q_sample(x0, 100, eps, s)
    for t in range(100, 0, -1):
        x_t_eps = (x - np.sqrt(s.alpha_bar(t)) * x0) / np.sqrt(1 - s.alpha_bar(t))
        x = ddpm_step(x, t, x_t_eps, s)
    np.testing.assert_allclose(x, x0, atol=1e-4)


def test_per_sample_streams_make_batches_independent_of_size():
    s = linear_schedule(1e-4, 0.05, 30)
    den = gaussian_denoiser(s, 0.0, 0.5)
    cfg = SamplerConfig.ddpm()
    rngs = RngState(4).fork(3)
    full = sample(den, (3, 5), s, cfg, rng=[r.copy() for r in rngs])
    single = sample(den, (1, 5), s, cfg, rng=[rngs[1].copy()])
    np.testing.assert_array_equal(full[1], single[0])


def test_conditioning_validation_and_select():
    with pytest.raises(ValueError):
        Conditioning("embedding")
    with pytest.raises(ValueError):
        Conditioning.embedding(np.array([[[np.nan]]]))
    with pytest.raises(ValueError):
        Conditioning("text", np.zeros(1))
    c = Conditioning.embedding(np.arange(12.0).reshape(3, 2, 2), np.ones((3, 2)))
    sel = c.select(np.array([2]))
    assert sel.value.shape == (1, 2, 2) and sel.key_mask.shape == (1, 2)
    with pytest.raises(ValueError):
        SamplerConfig("ddim")


def test_reverse_process_after_step_hook_sees_every_transition():
    s = linear_schedule(1e-4, 0.05, 20)
    seen = []
    reverse_process(zero_denoiser, np.zeros((1, 2)), s, SamplerConfig.ddim(20, 4), None, RngState(0),
                    after_step=lambda x, t: seen.append(t) or x)
    assert seen == [15, 10, 5, 0]


# -- inpainting ------------------------------------------------------------
@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_inpaint_preserves_unmasked_region(seed):
    s = linear_schedule(1e-4, 0.05, 20)
    g = np.random.default_rng(seed)
    x_known = g.uniform(-1, 1, (1, 1, 6, 6)).astype(np.float32)
    mask = (g.random((1, 1, 6, 6)) < 0.4).astype(np.float32)
    out = inpaint(gaussian_denoiser(s, 0.0, 0.3), x_known, mask, s, SamplerConfig.ddim(20, 5), rng=RngState(seed))
    keep = mask == 0
    assert out[keep].tobytes() == x_known[keep].tobytes()


def test_inpaint_limits():
    s = linear_schedule(1e-4, 0.05, 20)
    den = gaussian_denoiser(s, 0.2, 0.3)
    cfg = SamplerConfig.ddpm()
    x_known = np.random.default_rng(0).uniform(-1, 1, (2, 1, 4, 4)).astype(np.float32)
    zero = inpaint(den, x_known, np.zeros_like(x_known), s, cfg, rng=RngState(1))
    assert zero.tobytes() == x_known.tobytes()
    full = inpaint(den, x_known, np.ones_like(x_known), s, cfg, rng=RngState(2))
    assert full.tobytes() == sample(den, x_known.shape, s, cfg, rng=RngState(2)).tobytes()
    with pytest.raises(ValueError):
        inpaint(den, x_known, np.full_like(x_known, 0.5), s, cfg, rng=RngState(0))
    with pytest.raises(ShapeError):
        inpaint(den, x_known, np.zeros((1, 1, 4, 4)), s, cfg, rng=RngState(0))


def test_outpaint_variants():
    s = linear_schedule(1e-4, 0.05, 20)
    den = gaussian_denoiser(s, 0.0, 0.3)
    cfg = SamplerConfig.ddim(20, 5, eta=1.0)
    x_known = np.zeros((1, 1, 4, 4), np.float32)
    mask = np.zeros_like(x_known)
    mask[..., :, 2:] = 1
    one = outpaint(den, x_known, mask, s, cfg, rng=RngState(3))
    assert len(one) == 1
    a, b = outpaint(den, x_known, mask, s, cfg, rng=RngState(3), n_variants=2)
    assert np.array_equal(a[mask == 0], b[mask == 0])
    assert not np.array_equal(a[mask == 1], b[mask == 1])
    with pytest.raises(ValueError):
        outpaint(den, x_known, mask, s, cfg, rng=RngState(3), n_variants=0)
