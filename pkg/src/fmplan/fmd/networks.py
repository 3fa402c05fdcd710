"""Small convolutional denoiser / generator and the discriminator, as pure functions of param dicts."""
from __future__ import annotations

import numpy as np

from .. import autodiff as ad

EMBED_DIM = 16
# sinusoidal embedding frequencies for log(sigma)
_FREQS = 2.0 ** (np.arange(EMBED_DIM // 2) / 2.0 - 1.0)


def _conv_init(g, o, c, gain=1.0):
    return g.normal(0.0, gain * np.sqrt(2.0 / (c * 9)), size=(o, c, 3, 3))


def coord_channels(n: int, h: int, w: int) -> np.ndarray:
    rows = np.linspace(-1.0, 1.0, h)[:, None] * np.ones((1, w))
    cols = np.ones((h, 1)) * np.linspace(-1.0, 1.0, w)[None, :]
    return np.broadcast_to(np.stack([rows, cols])[None], (n, 2, h, w))


def init_denoiser(g: np.random.Generator) -> dict[str, np.ndarray]:
    e = EMBED_DIM
    return {
        "emb.w": g.normal(0.0, 1.0 / np.sqrt(e), size=(e, e)),
        "emb.b": np.zeros(e),
        "in.w": _conv_init(g, 16, 3),
        "in.b": np.zeros(16),
        "in.emb": g.normal(0.0, 0.1, size=(e, 16)),
        "down.w": _conv_init(g, 32, 16),
        "down.b": np.zeros(32),
        "down.emb": g.normal(0.0, 0.1, size=(e, 32)),
        "up.w": _conv_init(g, 16, 48),
        "up.b": np.zeros(16),
        "out.w": _conv_init(g, 1, 16, gain=0.1),
        "out.b": np.zeros(1),
    }


def param_count(params: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


def sigma_embedding(sigma: np.ndarray) -> np.ndarray:
    ls = np.log(np.asarray(sigma, dtype=np.float64))[:, None] * _FREQS[None, :]
    return np.concatenate([np.sin(ls), np.cos(ls)], axis=1)


def _as_params(params):
    return {k: ad.as_tensor(v) for k, v in params.items()}


def denoiser_raw(params, x, sigma: np.ndarray, sigma_data: float) -> ad.Tensor:
    """Raw network output for noisy maps ``x`` (N, H, W) at per-sample noise levels ``sigma`` (N,)."""
    p = _as_params(params)
    x = ad.as_tensor(x)
    n, h, w = x.shape
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,))
    c_in = 1.0 / np.sqrt(sigma ** 2 + sigma_data ** 2)
    xin = ad.reshape(ad.mul(x, c_in[:, None, None]), (n, 1, h, w))
    xin = ad.concat([xin, coord_channels(n, h, w)], axis=1)

    e = ad.silu(ad.add(ad.matmul(sigma_embedding(sigma), p["emb.w"]), p["emb.b"]))
    h1 = ad.conv2d(xin, p["in.w"], p["in.b"])
    h1 = ad.silu(ad.add(h1, ad.reshape(ad.matmul(e, p["in.emb"]), (n, 16, 1, 1))))
    h2 = ad.conv2d(h1, p["down.w"], p["down.b"], stride=2)
    h2 = ad.silu(ad.add(h2, ad.reshape(ad.matmul(e, p["down.emb"]), (n, 32, 1, 1))))
    u = ad.upsample2x(h2)
    h3 = ad.silu(ad.conv2d(ad.concat([u, h1], axis=1), p["up.w"], p["up.b"]))
    out = ad.conv2d(h3, p["out.w"], p["out.b"])
    return ad.reshape(out, (n, h, w))


def init_discriminator(g: np.random.Generator, h: int = 16, w: int = 24) -> dict[str, np.ndarray]:
    hh, ww = h, w
    for _ in range(3):
        hh, ww = (hh - 1) // 2 + 1, (ww - 1) // 2 + 1
    return {
        "d1.w": _conv_init(g, 8, 3),
        "d1.b": np.zeros(8),
        "d2.w": _conv_init(g, 16, 8),
        "d2.b": np.zeros(16),
        "d3.w": _conv_init(g, 32, 16),
        "d3.b": np.zeros(32),
        "head.w": g.normal(0.0, 0.1 / np.sqrt(32 * hh * ww), size=(32 * hh * ww, 1)),
        "head.b": np.zeros(1),
    }


def discriminator_logits(params, x, sigma: np.ndarray, sigma_data: float) -> ad.Tensor:
    """One logit per noisy map; input scaled by 1/sqrt(sigma^2 + sigma_data^2)."""
    p = _as_params(params)
    x = ad.as_tensor(x)
    n, h, w = x.shape
    c_in = 1.0 / np.sqrt(np.broadcast_to(sigma, (n,)) ** 2 + sigma_data ** 2)
    t = ad.reshape(ad.mul(x, c_in[:, None, None]), (n, 1, h, w))
    t = ad.concat([t, coord_channels(n, h, w)], axis=1)
    t = ad.silu(ad.conv2d(t, p["d1.w"], p["d1.b"], stride=2))
    t = ad.silu(ad.conv2d(t, p["d2.w"], p["d2.b"], stride=2))
    t = ad.silu(ad.conv2d(t, p["d3.w"], p["d3.b"], stride=2))
    t = ad.reshape(t, (n, -1))
    return ad.reshape(ad.add(ad.matmul(t, p["head.w"]), p["head.b"]), (n,))
