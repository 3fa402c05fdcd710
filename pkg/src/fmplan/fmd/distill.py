"""Distribution-matching distillation of the teacher into a one-shot generator, with a GAN anchor."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .. import autodiff as ad
from .. import rng
from ..optim import Adam
from .diffusion import Denoiser, DivergenceError, NoiseSchedule, add_noise, edm_loss
from .networks import denoiser_raw, discriminator_logits, init_discriminator

log = logging.getLogger(__name__)


@dataclass
class Generator:
    """Denoiser architecture evaluated at sigma* = sigma_max on sigma_max-scaled latents, softplus head."""

    params: dict[str, np.ndarray]
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)

    @property
    def sigma_star(self) -> float:
        return self.schedule.sigma_max

    def __call__(self, z, params=None) -> ad.Tensor:
        z = ad.as_tensor(z)
        n = z.shape[0]
        raw = denoiser_raw(self.params if params is None else params, ad.mul(z, self.sigma_star),
                           np.full(n, self.sigma_star), self.schedule.sigma_data)
        return ad.softplus(raw)

    @classmethod
    def from_teacher(cls, teacher: Denoiser) -> "Generator":
        return cls({k: v.copy() for k, v in teacher.params.items()}, teacher.schedule)


def generate_one_shot(G: Generator, z) -> ad.Tensor:
    """Per-CP generation: z (n_cp, n_rows, n_cols) -> non-negative fluence stack, differentiable in z."""
    if not np.all(np.isfinite(_value(z))):
        raise ValueError("latent contains non-finite values")
    return G(ad.as_tensor(z))


def bce_with_logits(logits: ad.Tensor, target: float) -> ad.Tensor:
    """Mean of -log sigmoid(l) (target 1) or -log(1 - sigmoid(l)) (target 0), via softplus."""
    sign = -1.0 if target == 1.0 else 1.0
    return ad.mean(ad.softplus(ad.mul(logits, sign)))


def gan_losses(D_params, G: Generator, real: np.ndarray, z: np.ndarray, seed, schedule: NoiseSchedule,
               G_params=None, D_grad: bool = True) -> tuple[ad.Tensor, ad.Tensor]:
    """Non-saturating logistic losses on noised real and generated maps.

    loss_D = -E[log D(N(f, s))] - E[log(1 - D(N(G(z), s)))];  loss_G = -E[log D(N(G(z), s))].
    """
    g = seed if isinstance(seed, np.random.Generator) else rng.stream(seed, rng.GAN)
    n_real, n_fake = len(real), len(z)
    s_real = schedule.sample_sigma(g, n_real)
    s_fake = schedule.sample_sigma(g, n_fake)
    real_t = add_noise(real, s_real, g)
    fake = G(z, G_params)
    eps = g.standard_normal(fake.shape)
    fake_t = ad.add(fake, eps * s_fake[:, None, None])

    dp = D_params if D_grad else {k: ad.Tensor(ad.as_tensor(v).data) for k, v in D_params.items()}
    l_real = discriminator_logits(dp, real_t, s_real, schedule.sigma_data)
    l_fake_d = discriminator_logits(dp, ad.stop_gradient(fake_t), s_fake, schedule.sigma_data)
    loss_d = ad.add(bce_with_logits(l_real, 1.0), bce_with_logits(l_fake_d, 0.0))
    frozen = {k: ad.Tensor(ad.as_tensor(v).data) for k, v in D_params.items()}
    loss_g = bce_with_logits(discriminator_logits(frozen, fake_t, s_fake, schedule.sigma_data), 1.0)
    return loss_d, loss_g


def dmd_cotangent(x: np.ndarray, real: Denoiser, fake: Denoiser, sigma: np.ndarray, g: np.random.Generator,
                  normalize: bool = True) -> np.ndarray:
    """Output cotangent -(s_real - s_fake) at f_t = x + sigma*eps, optionally scaled by sigma^2 / mean|x - mu_real|."""
    ft = add_noise(x, sigma, g)
    with ad.no_grad():
        mu_real = _value(real(ft, sigma))
        mu_fake = _value(fake(ft, sigma))
    s2 = (sigma ** 2)[:, None, None]
    score_diff = (mu_real - mu_fake) / s2  # s_real - s_fake (the f_t terms cancel)
    cot = -score_diff
    if normalize:
        w = np.abs(x - mu_real).reshape(len(x), -1).mean(axis=1)[:, None, None]
        cot = cot * s2 / np.maximum(w, 1e-8)
    return cot


def _value(x) -> np.ndarray:
    return x.data if isinstance(x, ad.Tensor) else np.asarray(x, dtype=np.float64)


def dmd_surrogate(G: Generator, params, z: np.ndarray, cot: np.ndarray) -> ad.Tensor:
    """<stopgrad(cotangent), G(z)> / batch; its parameter gradient is the distribution-matching gradient."""
    out = G(z, params)
    return ad.mul(ad.sum_(ad.mul(out, cot)), 1.0 / len(z))


def dmd_generator_grad(G: Generator, real: Denoiser, fake: Denoiser, z: np.ndarray, seed,
                       normalize: bool = True) -> dict[str, np.ndarray]:
    """Backpropagate the score-difference cotangent through G(z); scores are held constant."""
    g = seed if isinstance(seed, np.random.Generator) else rng.stream(seed, rng.DISTILL)
    sigma = G.schedule.sample_sigma(g, len(z))
    p = {k: ad.Tensor(v, requires_grad=True) for k, v in G.params.items()}
    out = G(z, p)
    cot = dmd_cotangent(out.data, real, fake, sigma, g, normalize)
    grads = ad.grad(out, p.values(), seed=cot / len(z))
    return dict(zip(p.keys(), grads))


@dataclass
class DistillResult:
    generator: Generator
    fake: Denoiser
    disc: dict[str, np.ndarray]
    history: list[dict] = field(default_factory=list)
    opts: dict[str, Adam] = field(default_factory=dict)


def distill(teacher: Denoiser, dataset: np.ndarray, steps: int, seed: int = 0, batch_size: int = 32,
            lambda_dmd: float = 1.0, lambda_gan: float = 0.1, fake_updates: int = 5,
            generator_lr: float = 1e-4, fake_lr: float = 1e-4, disc_lr: float = 1e-4,
            normalize: bool = True, dmd_sigma_min: float | None = 2.0, resume: DistillResult | None = None,
            log_every: int = 0) -> DistillResult:
    """Alternating fake-score / discriminator / generator updates; generator starts at the teacher weights.

    ``dmd_sigma_min`` raises the lower end of the log-uniform noise range used
    for the distribution-matching gradient only; the score networks still train
    on the full schedule.  At low noise the teacher extrapolates upward on
    samples brighter than the data, which feeds back into ever brighter
    samples, so the default keeps DMD to sigma >= 2.  None restores the full range.
    """
    dataset = np.asarray(dataset, dtype=np.float64)
    sched = teacher.schedule
    use_full = dmd_sigma_min is None or dmd_sigma_min <= sched.sigma_min
    dmd_sched = sched if use_full else replace(sched, sigma_min=dmd_sigma_min)
    h, w = dataset.shape[1:]
    if resume is None:
        res = DistillResult(Generator.from_teacher(teacher), teacher.copy(),
                            init_discriminator(rng.stream(seed, rng.INIT, 1), h, w))
    else:
        res = resume
    G, fake = res.generator, res.fake
    if not res.opts:
        res.opts = {"G": Adam(G.params, lr=generator_lr), "fake": Adam(fake.params, lr=fake_lr),
                    "D": Adam(res.disc, lr=disc_lr)}
    start = len(res.history)
    for step in range(start, start + steps):
        g = rng.stream(seed, rng.DISTILL, step)

        fake_loss = 0.0
        for _ in range(fake_updates if lambda_dmd > 0 else 0):
            with ad.no_grad():
                x = G(g.standard_normal((batch_size, h, w))).data
            p = {k: ad.Tensor(v, requires_grad=True) for k, v in fake.params.items()}
            loss = edm_loss(fake, x, g, sched, params=p)
            res.opts["fake"].step(dict(zip(p.keys(), ad.grad(loss, p.values()))))
            fake_loss = float(loss.data)

        loss_d_val = 0.0
        if lambda_gan > 0:
            real = dataset[g.integers(0, len(dataset), size=batch_size)]
            dp = {k: ad.Tensor(v, requires_grad=True) for k, v in res.disc.items()}
            with ad.no_grad():
                zd = g.standard_normal((batch_size, h, w))
            loss_d, _ = gan_losses(dp, _Frozen(G), real, zd, g, sched)
            res.opts["D"].step(dict(zip(dp.keys(), ad.grad(loss_d, dp.values()))))
            loss_d_val = float(loss_d.data)

        z = g.standard_normal((batch_size, h, w))
        p = {k: ad.Tensor(v, requires_grad=True) for k, v in G.params.items()}
        out = G(z, p)
        total = ad.Tensor(0.0)
        if lambda_dmd > 0:
            sigma = dmd_sched.sample_sigma(g, batch_size)
            cot = dmd_cotangent(out.data, teacher, fake, sigma, g, normalize)
            total = ad.add(total, ad.mul(ad.sum_(ad.mul(out, cot)), lambda_dmd / batch_size))
        loss_g_val = 0.0
        if lambda_gan > 0:
            s_fake = sched.sample_sigma(g, batch_size)
            fake_t = ad.add(out, g.standard_normal(out.shape) * s_fake[:, None, None])
            loss_g = bce_with_logits(discriminator_logits(res.disc, fake_t, s_fake, sched.sigma_data), 1.0)
            total = ad.add(total, ad.mul(loss_g, lambda_gan))
            loss_g_val = float(loss_g.data)
        grads = ad.grad(total, p.values())
        if not all(np.all(np.isfinite(gr)) for gr in grads):
            raise DivergenceError(f"generator gradient non-finite at distillation step {step}")
        res.opts["G"].step(dict(zip(p.keys(), grads)))
        res.history.append({"step": step + 1, "fake_loss": fake_loss, "loss_d": loss_d_val, "loss_g": loss_g_val})
        if log_every and (step + 1) % log_every == 0:
            log.info("distill step %d fake %.3f D %.3f G %.3f", step + 1, fake_loss, loss_d_val, loss_g_val)
    return res


class _Frozen:
    """Generator wrapper that produces constants (no parameter gradients)."""

    def __init__(self, G: Generator):
        self.G = G

    def __call__(self, z, params=None):
        with ad.no_grad():
            return ad.Tensor(self.G(z).data)
