import math

import numpy as np
import pytest

from fmplan import autodiff as ad
from fmplan import rng
from fmplan.fmd.diffusion import (Denoiser, DivergenceError, NoiseSchedule, add_noise, edm_loss, sample_teacher,
                                  score_from_denoiser, train_teacher)
from fmplan.fmd.distill import (Generator, bce_with_logits, distill, dmd_cotangent, dmd_generator_grad,
                                dmd_surrogate, gan_losses, generate_one_shot)
from fmplan.fmd.networks import init_denoiser, init_discriminator, param_count

SCHED = NoiseSchedule()


def gaussian_denoiser(m, s):
    """Posterior mean for data N(m, s^2 I) under f_t = f + sigma * eps."""
    def d(x, sigma):
        sig = np.asarray(sigma, float).reshape((-1,) + (1,) * (np.ndim(x) - 1))
        return m + s * s / (s * s + sig * sig) * (np.asarray(x) - m)
    return d


def test_param_budget():
    assert param_count(init_denoiser(np.random.default_rng(0))) < 100_000


def test_schedule_validation_and_grid():
    with pytest.raises(ValueError):
        NoiseSchedule(sigma_min=1.0, sigma_max=0.5)
    grid = SCHED.sampling_grid(18)
    assert grid[0] == pytest.approx(10.0) and grid[-1] == pytest.approx(0.02)
    assert np.all(np.diff(np.log(grid)) == pytest.approx(np.log(0.002) / 18))
    s = SCHED.sample_sigma(np.random.default_rng(0), 20000)
    assert s.min() >= 0.02 and s.max() <= 10.0
    assert np.median(np.log(s)) == pytest.approx(0.5 * (np.log(0.02) + np.log(10.0)), abs=0.05)


def test_add_noise_statistics(g):
    f = g.random((4, 5))
    assert np.abs(add_noise(f, 1e-9, 0) - f).max() <= 6e-9
    sigma = 0.7
    draws = np.stack([add_noise(f, sigma, rng.stream(0, rng.NOISE, i)) for i in range(10_000)])
    assert np.abs(draws.mean(axis=0) - f).max() <= 3 * sigma / 100 * 1.5
    assert abs((draws - f).var() / sigma ** 2 - 1) < 0.05
    with pytest.raises(ValueError):
        add_noise(f, 0.0, 0)


def test_edm_loss_trivial_cases(g):
    batch = g.random((6, 16, 24))
    assert float(edm_loss(lambda x, s: ad.Tensor(np.zeros_like(x)), batch, 0, SCHED).data) == pytest.approx(
        float(np.mean(np.sum(batch ** 2, axis=(1, 2)))))
    tiny = NoiseSchedule(1e-12, 2e-12)
    assert float(edm_loss(lambda x, s: ad.Tensor(x), batch, 0, tiny).data) < 1e-20
    with pytest.raises(ValueError):
        edm_loss(lambda x, s: x, np.zeros((0, 2, 2)), 0, SCHED)


def test_tweedie_gaussian_oracle(g):
    m, s = 1.3, 0.8
    den = gaussian_denoiser(m, s)
    for sigma in (0.02, 0.5, 3.0, 10.0):
        ft = g.normal(size=(3, 4, 5)) * 2
        score = score_from_denoiser(den, ft, np.full(3, sigma))
        np.testing.assert_allclose(score, (m - ft) / (s * s + sigma * sigma), rtol=0, atol=1e-10)


def test_score_trivia(g):
    ft = g.normal(size=(2, 3, 3))
    assert np.all(score_from_denoiser(lambda x, s: x, ft, np.ones(2)) == 0)
    d = lambda x, s: x + 1.0  # noqa: E731
    a = score_from_denoiser(d, ft, np.full(2, 1.0))
    b = score_from_denoiser(d, ft, np.full(2, 2.0))
    np.testing.assert_allclose(a, 4 * b)


def test_teacher_training_smoke_and_determinism():
    data = np.stack([np.outer(np.hanning(16), np.hanning(24)) * (1 + k % 3) for k in range(12)])
    a = train_teacher(data, SCHED, 100, batch_size=8, seed=5)
    L = np.asarray(a.losses)
    avg = np.convolve(L, np.ones(20) / 20, mode="valid")
    assert avg[-1] < avg[0]
    assert L[50:].mean() < L[:50].mean()
    b = train_teacher(data, SCHED, 100, batch_size=8, seed=5)
    assert all(a.model.params[k].tobytes() == b.model.params[k].tobytes() for k in a.model.params)


def test_teacher_resume_continues_exactly():
    data = np.random.default_rng(0).random((10, 16, 24))
    full = train_teacher(data, SCHED, 20, batch_size=4, seed=1)
    part = train_teacher(data, SCHED, 12, batch_size=4, seed=1)
    part = train_teacher(data, SCHED, 8, batch_size=4, seed=1, resume=part)
    assert part.losses == full.losses


def test_one_sample_overfit():
    f = np.outer(np.hanning(16), np.hanning(24))[None] * 3
    res = train_teacher(f, SCHED, 2000, lr=1e-3, batch_size=1, seed=0)
    L = np.asarray(res.losses)
    assert L[-200:].mean() < 0.01 * L[:20].mean()


def test_sampler_deterministic_and_converges(small_denoiser):
    a = sample_teacher(small_denoiser, 18, 3, n=4)
    b = sample_teacher(small_denoiser, 18, 3, n=4)
    assert a.tobytes() == b.tobytes() and (a >= 0).all()
    c = sample_teacher(small_denoiser, 36, 3, n=4)
    rel = [np.linalg.norm(c[i] - a[i]) / max(np.linalg.norm(a[i]), 1e-12) for i in range(4)]
    assert np.mean(rel) < 0.05
    with pytest.raises(ValueError):
        sample_teacher(small_denoiser, 0, 0)


def test_sampler_recovers_gaussian_statistics():
    m, s = 10.0, 1.0
    gd = gaussian_denoiser(m, s)

    class Analytic(Denoiser):
        def __call__(self, x, sigma, params=None):
            return ad.Tensor(gd(x, sigma))

    x = sample_teacher(Analytic({}, NoiseSchedule(0.02, 10.0)), 40, 0, n=4000, shape=(1, 1)).ravel()
    # the flow maps N(0, sigma_max^2) to N(m (1 - s/sqrt(s^2+sigma_max^2)), s^2 sigma_max^2/(s^2+sigma_max^2))
    # up to the sigma_min tail; the clamp at 0 is irrelevant this far from zero
    k = s / math.sqrt(s * s + 100.0)
    assert x.mean() == pytest.approx(m * (1 - k), abs=0.05)
    assert x.std() == pytest.approx(10.0 * k, rel=0.05)


def test_dmd_zero_when_scores_match(small_generator, small_denoiser):
    z = np.random.default_rng(0).normal(size=(3, 16, 24))
    grads = dmd_generator_grad(small_generator, small_denoiser, small_denoiser, z, 0)
    assert all(np.all(v == 0) for v in grads.values())


def test_dmd_matches_stop_gradient_surrogate(small_generator, small_denoiser):
    fake = small_denoiser.copy()
    fake.params["out.b"] = fake.params["out.b"] + 0.3
    z = np.random.default_rng(1).normal(size=(3, 16, 24))
    direct = dmd_generator_grad(small_generator, small_denoiser, fake, z, 9)

    g = rng.stream(9, rng.DISTILL)
    sigma = small_generator.schedule.sample_sigma(g, 3)
    with ad.no_grad():
        x = small_generator(z).data
    cot = dmd_cotangent(x, small_denoiser, fake, sigma, g)
    p = {k: ad.Tensor(v, requires_grad=True) for k, v in small_generator.params.items()}
    sur = dmd_surrogate(small_generator, p, z, cot)
    for k, gk in zip(p, ad.grad(sur, p.values())):
        np.testing.assert_allclose(direct[k], gk, rtol=0, atol=1e-12)


@pytest.mark.parametrize("m", [1.5, -0.8])
def test_dmd_sign_on_analytic_gaussians(m):
    real, fake = gaussian_denoiser(0.0, 1.0), gaussian_denoiser(m, 1.0)
    g = np.random.default_rng(4)
    z = g.normal(size=(4000, 1, 1))
    b = ad.Tensor(np.array(m), requires_grad=True)
    out = ad.add(z, b)  # scalar generator G(z) = b + z, currently distributed as the fake
    sigma = SCHED.sample_sigma(g, len(z))
    cot = dmd_cotangent(out.data, real, fake, sigma, g)
    (gb,) = ad.grad(ad.mul(ad.sum_(ad.mul(out, cot)), 1 / len(z)), [b])
    assert np.sign(gb) == np.sign(m)  # descent moves the offset toward 0


def test_gan_loss_values():
    assert float(bce_with_logits(ad.Tensor(np.zeros(5)), 1.0).data) + float(
        bce_with_logits(ad.Tensor(np.zeros(5)), 0.0).data) == pytest.approx(2 * math.log(2))
    perfect = float(bce_with_logits(ad.Tensor(np.full(4, 40.0)), 1.0).data) + float(
        bce_with_logits(ad.Tensor(np.full(4, -40.0)), 0.0).data)
    assert perfect < 1e-15


def test_gan_losses_half_discriminator(small_generator):
    D = init_discriminator(np.random.default_rng(0))
    D = {k: np.zeros_like(v) for k, v in D.items()}
    real = np.random.default_rng(1).random((3, 16, 24))
    z = np.random.default_rng(2).normal(size=(3, 16, 24))
    loss_d, loss_g = gan_losses(D, small_generator, real, z, 0, SCHED)
    assert float(loss_d.data) == pytest.approx(2 * math.log(2))
    assert float(loss_g.data) == pytest.approx(math.log(2))


def test_loss_g_gradient_fd(small_generator):
    D = init_discriminator(np.random.default_rng(0))
    real = np.random.default_rng(1).random((2, 16, 24))
    z = np.random.default_rng(2).normal(size=(2, 16, 24))

    def f(t):
        p = dict(small_generator.params)
        p["out.w"] = t
        return gan_losses(D, small_generator, real, z, 3, SCHED, G_params=p)[1]

    assert ad.finite_difference_check(f, small_generator.params["out.w"], 1e-5) < 1e-4


def test_one_shot_generation(small_generator):
    z = np.random.default_rng(0).normal(size=(24, 16, 24))
    out = generate_one_shot(small_generator, z).data
    assert out.shape == z.shape and (out >= 0).all()
    assert generate_one_shot(small_generator, z).data.tobytes() == out.tobytes()
    w = np.random.default_rng(1).normal(size=(2, 16, 24))
    mask = np.zeros((2, 16, 24), bool)
    mask[:, ::3, ::4] = True
    err = ad.finite_difference_check(lambda t: ad.sum_(ad.mul(generate_one_shot(small_generator, t), w)), z[:2],
                                     1e-5, mask)
    assert err < 1e-4
    with pytest.raises(ValueError):
        generate_one_shot(small_generator, np.full((1, 16, 24), np.nan))


def test_distill_short_run_deterministic(small_denoiser):
    data = np.random.default_rng(0).random((8, 16, 24))
    a = distill(small_denoiser, data, 2, seed=4, batch_size=3, fake_updates=2)
    b = distill(small_denoiser, data, 2, seed=4, batch_size=3, fake_updates=2)
    assert all(a.generator.params[k].tobytes() == b.generator.params[k].tobytes() for k in a.generator.params)
    assert all(a.disc[k].tobytes() == b.disc[k].tobytes() for k in a.disc)
    assert len(a.history) == 2


def test_distill_starts_from_teacher(small_denoiser):
    G = Generator.from_teacher(small_denoiser)
    for k, v in small_denoiser.params.items():
        assert G.params[k] is not v and np.array_equal(G.params[k], v)


def test_divergence_error_type():
    assert issubclass(DivergenceError, FloatingPointError)
