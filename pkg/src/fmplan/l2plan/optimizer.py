"""Coordinatewise LSTM meta-optimizer that predicts per-coordinate Adam decays."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad

N_INPUTS = 2
LOG_CLAMP = 10.0
EPS = 1e-8
BETA0 = 0.9
GAMMA0 = 0.999


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def init_meta_params(g: np.random.Generator, hidden: int = 16, features: int = 8) -> dict[str, np.ndarray]:
    """delta starts as an identity block on the two inputs; heads start at zero weight with Adam-valued biases."""
    dw = g.normal(0.0, 0.1, size=(N_INPUTS, features))
    dw[:, :N_INPUTS] = np.eye(N_INPUTS)
    db = np.zeros(features)
    p = {"delta.w": dw, "delta.b": db}
    s = 1.0 / math.sqrt(hidden)
    for name, n_in in (("l1", features), ("l2", hidden)):
        p[f"{name}.wx"] = g.uniform(-s, s, size=(n_in, 4 * hidden))
        p[f"{name}.wh"] = g.uniform(-s, s, size=(hidden, 4 * hidden))
        p[f"{name}.b"] = np.zeros(4 * hidden)
    p["beta.w"] = np.zeros((hidden, 1))
    p["beta.b"] = np.array([logit(BETA0)])
    p["gamma.w"] = np.zeros((hidden, 1))
    p["gamma.b"] = np.array([logit(GAMMA0)])
    return p


def hidden_size(meta) -> int:
    return ad.as_tensor(meta["l1.wh"]).shape[0]


def normalize_gradient(g: np.ndarray) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    rms = math.sqrt(float(np.mean(g * g))) if g.size else 0.0
    return g / max(rms, EPS)


def gradient_inputs(g: np.ndarray, segments: list[slice] | None = None) -> np.ndarray:
    """(N, 2) raw inputs [g_hat, clamp(log(|g_hat| + 1e-8))], RMS-normalised per segment."""
    g = np.asarray(g, dtype=np.float64).ravel()
    segments = segments or [slice(0, g.size)]
    gh = np.empty_like(g)
    for s in segments:
        gh[s] = normalize_gradient(g[s])
    logm = np.clip(np.log(np.abs(gh) + EPS), -LOG_CLAMP, LOG_CLAMP)
    return np.stack([gh, logm], axis=1)


def preprocess_gradient(meta, g: np.ndarray, segments: list[slice] | None = None) -> ad.Tensor:
    """delta([g_hat, log|g_hat|]) per coordinate -> (N, features)."""
    x = gradient_inputs(g, segments)
    return ad.add(ad.matmul(x, meta["delta.w"]), meta["delta.b"])


@dataclass
class LSTMState:
    h1: ad.Tensor
    c1: ad.Tensor
    h2: ad.Tensor
    c2: ad.Tensor

    @classmethod
    def zeros(cls, n: int, hidden: int) -> "LSTMState":
        z = np.zeros((n, hidden))
        return cls(ad.Tensor(z), ad.Tensor(z), ad.Tensor(z), ad.Tensor(z))


def _cell(meta, name: str, x, h, c, hidden: int):
    gates = ad.add(ad.add(ad.matmul(x, meta[f"{name}.wx"]), ad.matmul(h, meta[f"{name}.wh"])), meta[f"{name}.b"])
    i = ad.sigmoid(gates[:, 0:hidden])
    f = ad.sigmoid(gates[:, hidden:2 * hidden])
    cand = ad.tanh(gates[:, 2 * hidden:3 * hidden])
    o = ad.sigmoid(gates[:, 3 * hidden:4 * hidden])
    c_new = ad.add(ad.mul(f, c), ad.mul(i, cand))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


def lstm_step(meta, features, state: LSTMState) -> LSTMState:
    """Two stacked LSTM cells applied to every coordinate with shared weights."""
    hidden = hidden_size(meta)
    h1, c1 = _cell(meta, "l1", features, state.h1, state.c1, hidden)
    h2, c2 = _cell(meta, "l2", h1, state.h2, state.c2, hidden)
    return LSTMState(h1, c1, h2, c2)


def predict_hyperparams(meta, state: LSTMState) -> tuple[ad.Tensor, ad.Tensor]:
    """Per-coordinate (beta, gamma) in (0, 1) from the top hidden state."""
    beta = ad.sigmoid(ad.add(ad.matmul(state.h2, meta["beta.w"]), meta["beta.b"]))
    gamma = ad.sigmoid(ad.add(ad.matmul(state.h2, meta["gamma.w"]), meta["gamma.b"]))
    return ad.reshape(beta, (-1,)), ad.reshape(gamma, (-1,))


@dataclass
class MomentState:
    m: ad.Tensor
    v: ad.Tensor
    beta_prod: ad.Tensor  # running product of predicted beta, i.e. beta_bar ** k
    gamma_prod: ad.Tensor
    k: int = 0

    @classmethod
    def zeros(cls, n: int) -> "MomentState":
        return cls(ad.Tensor(np.zeros(n)), ad.Tensor(np.zeros(n)), ad.Tensor(np.ones(n)), ad.Tensor(np.ones(n)), 0)


def optimizee_step(phi, g, moments: MomentState, beta, gamma, eta: float = 1e-2, eps: float = EPS,
                   bias_correction: str = "geometric") -> tuple[ad.Tensor, MomentState]:
    """Adam-form step with predicted decays; ``moments.k`` is incremented here."""
    g = np.asarray(g, dtype=np.float64)
    k = moments.k + 1
    m = ad.add(ad.mul(beta, moments.m), ad.mul(ad.sub(1.0, beta), g))
    v = ad.add(ad.mul(gamma, moments.v), ad.mul(ad.sub(1.0, gamma), g * g))
    bprod = ad.mul(moments.beta_prod, beta)
    gprod = ad.mul(moments.gamma_prod, gamma)
    if bias_correction == "geometric":
        mhat = ad.div(m, ad.sub(1.0, bprod))
        vhat = ad.div(v, ad.sub(1.0, gprod))
    elif bias_correction == "constant":
        mhat = ad.mul(m, 1.0 / (1.0 - BETA0 ** k))
        vhat = ad.mul(v, 1.0 / (1.0 - GAMMA0 ** k))
    else:
        raise ValueError(f"unknown bias correction {bias_correction!r}")
    step = ad.div(mhat, ad.add(ad.sqrt(vhat), eps))
    phi_new = ad.sub(phi, ad.mul(step, eta))
    return phi_new, MomentState(m, v, bprod, gprod, k)


class LearnedOptimizer:
    """Stateful L2Plan optimizer over a flat parameter vector split into segments.

    With ``meta`` given as Tensors requiring grad, the update chain stays on
    the graph so an outer loss can be differentiated w.r.t. the meta weights;
    the incoming gradients themselves are always constants.
    """

    def __init__(self, meta, n: int, segments: list[slice] | None = None, eta: float = 1e-2,
                 bias_correction: str = "geometric", pinned: tuple[float, float] | None = None):
        self.meta = meta
        self.segments = segments
        self.eta = eta
        self.bias_correction = bias_correction
        self.pinned = pinned
        self.lstm = LSTMState.zeros(n, hidden_size(meta))
        self.moments = MomentState.zeros(n)

    def step(self, phi, g: np.ndarray):
        g = np.asarray(g, dtype=np.float64).ravel()
        if self.pinned is not None:
            n = g.size
            beta, gamma = ad.Tensor(np.full(n, self.pinned[0])), ad.Tensor(np.full(n, self.pinned[1]))
        else:
            feats = preprocess_gradient(self.meta, g, self.segments)
            self.lstm = lstm_step(self.meta, feats, self.lstm)
            beta, gamma = predict_hyperparams(self.meta, self.lstm)
        phi, self.moments = optimizee_step(phi, g, self.moments, beta, gamma, self.eta,
                                           bias_correction=self.bias_correction)
        self.last_hyper = (beta, gamma)
        return phi
