"""Teacher diffusion model: forward noising, denoising score matching, Tweedie scores, Heun sampling."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import autodiff as ad
from .. import rng
from ..optim import Adam
from .networks import denoiser_raw, init_denoiser

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.02
    sigma_max: float = 10.0
    sigma_data: float = 2.5

    def __post_init__(self):
        if not (0 < self.sigma_min < self.sigma_max):
            raise ValueError("need 0 < sigma_min < sigma_max")

    def sample_sigma(self, g: np.random.Generator, n: int) -> np.ndarray:
        """Log-uniform on [sigma_min, sigma_max]."""
        return np.exp(g.uniform(np.log(self.sigma_min), np.log(self.sigma_max), size=n))

    def sampling_grid(self, n_steps: int) -> np.ndarray:
        return self.sigma_max * (self.sigma_min / self.sigma_max) ** (np.arange(n_steps + 1) / n_steps)


@dataclass
class Denoiser:
    """Parameters plus the noise schedule they were trained under."""

    params: dict[str, np.ndarray]
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)

    def __call__(self, x, sigma, params=None) -> ad.Tensor:
        return denoiser_raw(self.params if params is None else params, x, sigma, self.schedule.sigma_data)

    def copy(self) -> "Denoiser":
        return Denoiser({k: v.copy() for k, v in self.params.items()}, self.schedule)


def add_noise(f: np.ndarray, sigma, seed: int | np.random.Generator) -> np.ndarray:
    """f + sigma * eps with eps ~ N(0, I); ``sigma`` may be per-sample along axis 0."""
    f = np.asarray(f, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    g = seed if isinstance(seed, np.random.Generator) else rng.stream(seed, rng.NOISE)
    eps = g.standard_normal(f.shape)
    if sigma.ndim == 1 and f.ndim > 1:
        sigma = sigma.reshape((-1,) + (1,) * (f.ndim - 1))
    return f + sigma * eps


def edm_loss(denoise: Callable, batch: np.ndarray, seed: int | np.random.Generator,
             schedule: NoiseSchedule, params=None) -> ad.Tensor:
    """Mean over the batch of ||denoise(f_t, sigma) - f||^2 with sigma log-uniform.

    ``denoise(x, sigma)`` is any callable (``Denoiser`` or a plain function);
    when ``params`` is given it is forwarded so gradients flow to it.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    g = seed if isinstance(seed, np.random.Generator) else rng.stream(seed, rng.NOISE)
    sigma = schedule.sample_sigma(g, batch.shape[0])
    ft = add_noise(batch, sigma, g)
    out = denoise(ft, sigma) if params is None else denoise(ft, sigma, params)
    r = ad.sub(out, batch)
    return ad.mul(ad.sum_(ad.square(r)), 1.0 / batch.shape[0])


def score_from_denoiser(denoise: Callable, ft: np.ndarray, sigma) -> np.ndarray:
    """Tweedie score under alpha_t = 1: (denoise(f_t) - f_t) / sigma^2."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    with ad.no_grad():
        d = denoise(ft, sigma)
    d = d.data if isinstance(d, ad.Tensor) else np.asarray(d)
    s2 = sigma ** 2
    if s2.ndim == 1 and np.ndim(ft) > 1:
        s2 = s2.reshape((-1,) + (1,) * (np.ndim(ft) - 1))
    return (d - ft) / s2


@dataclass
class TrainResult:
    model: Denoiser
    losses: list[float]
    optimizer: Adam | None = None


def train_teacher(dataset: np.ndarray, schedule: NoiseSchedule, steps: int, lr: float = 1e-4,
                  batch_size: int = 32, seed: int = 0, resume: TrainResult | None = None,
                  log_every: int = 0) -> TrainResult:
    """Adam minimisation of the denoising loss over per-CP maps ``dataset`` (N, H, W)."""
    dataset = np.asarray(dataset, dtype=np.float64)
    if resume is not None:
        model, losses, opt = resume.model, list(resume.losses), resume.optimizer
    else:
        model = Denoiser(init_denoiser(rng.stream(seed, rng.INIT, 0)), schedule)
        losses, opt = [], None
    if opt is None:
        opt = Adam(model.params, lr=lr)
    start = len(losses)
    for step in range(start, start + steps):
        g = rng.stream(seed, rng.TEACHER, step)
        idx = g.integers(0, dataset.shape[0], size=batch_size)
        p = {k: ad.Tensor(v, requires_grad=True) for k, v in model.params.items()}
        loss = edm_loss(model, dataset[idx], g, schedule, params=p)
        if not np.isfinite(loss.data):
            raise DivergenceError(f"teacher loss diverged at step {step}")
        grads = ad.grad(loss, p.values())
        opt.step(dict(zip(p.keys(), grads)))
        losses.append(float(loss.data))
        if log_every and (step + 1) % log_every == 0:
            log.info("teacher step %d loss %.4f", step + 1, np.mean(losses[-log_every:]))
    return TrainResult(model, losses, opt)


def sample_teacher(model: Denoiser, n_steps: int, seed: int, n: int = 1,
                   shape: tuple[int, int] = (16, 24)) -> np.ndarray:
    """Deterministic Heun probability-flow integration from sigma_max to sigma_min, clamped at 0."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    g = rng.stream(seed, rng.SAMPLER)
    sched = model.schedule
    sig = sched.sampling_grid(n_steps)
    x = sched.sigma_max * g.standard_normal((n,) + tuple(shape))
    with ad.no_grad():
        for i in range(n_steps):
            s0, s1 = sig[i], sig[i + 1]
            d0 = (x - model(x, np.full(n, s0)).data) / s0
            xe = x + (s1 - s0) * d0
            d1 = (xe - model(xe, np.full(n, s1)).data) / s1
            x = x + (s1 - s0) * 0.5 * (d0 + d1)
    return np.maximum(x, 0.0)
