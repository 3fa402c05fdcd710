"""Planning loops: the MAP objective over phi = {z, MU}, baseline optimizers, inner rollouts and meta-training."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from .. import rng
from ..domain import Case, Plan, Provenance
from ..dose import compute_dose, dose_tensor
from ..fmd.distill import Generator, generate_one_shot
from ..objectives import LAMBDA_MU, LAMBDA_Z, FlexTerm, PlanLossBreakdown, plan_loss
from ..optim import Adam, adam_update, rmsprop_update, sgd_momentum_update
from .optimizer import LearnedOptimizer, init_meta_params

log = logging.getLogger(__name__)

BASELINES = ("adam", "sgdm", "rmsprop")
BASELINE_DEFAULTS = {
    "adam": {"lr": 1e-2, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "sgdm": {"lr": 1e-2, "momentum": 0.9},
    "rmsprop": {"lr": 1e-2, "alpha": 0.99, "eps": 1e-8},
}


class RolloutError(FloatingPointError):
    pass


@dataclass
class PlanParameters:
    z: np.ndarray  # (n_cp, n_rows, n_cols)
    mu_raw: np.ndarray  # (n_cp,)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.z.ravel(), self.mu_raw])

    @property
    def segments(self) -> list[slice]:
        nz = self.z.size
        return [slice(0, nz), slice(nz, nz + self.mu_raw.size)]

    def unflat(self, x: np.ndarray) -> "PlanParameters":
        nz = self.z.size
        return PlanParameters(np.asarray(x[:nz]).reshape(self.z.shape), np.asarray(x[nz:]).copy())

    @classmethod
    def init(cls, case: Case, seed: int) -> "PlanParameters":
        """z ~ N(0, I) from the planning stream, mu_raw = 0 (MU at mid-range)."""
        c = case.constraints
        g = rng.stream(seed, rng.PLANNING)
        return cls(g.standard_normal((case.arc.n_cp, c.n_rows, c.n_cols)), np.zeros(case.arc.n_cp))


def mu_from_raw(mu_raw, c) -> ad.Tensor:
    return ad.add(ad.mul(ad.sigmoid(mu_raw), c.mu_max - c.mu_min), c.mu_min)


@dataclass
class Objective:
    """L_plan for one case as a function of phi, with gradient."""

    case: Case
    G: Generator
    lambda_z: float = LAMBDA_Z
    lambda_mu: float = LAMBDA_MU
    flex: FlexTerm | None = None

    def __call__(self, phi: PlanParameters, need_grad: bool = True):
        z = ad.Tensor(phi.z, requires_grad=need_grad)
        mr = ad.Tensor(phi.mu_raw, requires_grad=need_grad)
        f = generate_one_shot(self.G, z)
        mu = mu_from_raw(mr, self.case.constraints)
        dose = dose_tensor(self.case.operator, f, mu)
        br = plan_loss(dose, self.case.target_dose, z, mu, self.lambda_z, self.lambda_mu, self.flex)
        if not np.isfinite(br.total):
            raise RolloutError("non-finite planning loss")
        root, br.tensor = br.tensor, None  # callers keep breakdowns; don't let them pin the graph
        if not need_grad:
            return br, None
        gz, gm = ad.grad(root, [z, mr])
        return br, np.concatenate([gz.ravel(), gm])


def baseline_step(kind: str, phi: np.ndarray, g: np.ndarray, state: dict, hyper: dict | None = None):
    """Textbook adam / sgdm / rmsprop update; ``state`` is updated and returned."""
    if kind not in BASELINE_DEFAULTS:
        raise ValueError(f"unknown baseline optimizer {kind!r}")
    h = dict(BASELINE_DEFAULTS[kind])
    h.update(hyper or {})
    if kind == "adam":
        k = state.get("k", 0) + 1
        phi, m, v = adam_update(phi, g, state.get("m", np.zeros_like(phi)), state.get("v", np.zeros_like(phi)), k,
                                h["lr"], h["beta1"], h["beta2"], h["eps"])
        return phi, {"m": m, "v": v, "k": k}
    if kind == "sgdm":
        phi, vel = sgd_momentum_update(phi, g, state.get("vel", np.zeros_like(phi)), h["lr"], h["momentum"])
        return phi, {"vel": vel}
    phi, sq = rmsprop_update(phi, g, state.get("sq", np.zeros_like(phi)), h["lr"], h["alpha"], h["eps"])
    return phi, {"sq": sq}


@dataclass
class PlanResult:
    plan: Plan
    params: PlanParameters
    dose: np.ndarray
    trace: list[PlanLossBreakdown]
    initial: PlanLossBreakdown
    final: PlanLossBreakdown
    seconds: float
    optimizer: str
    steps: int

    def trace_rows(self) -> list[list[float]]:
        return [[k + 1, *b.row()] for k, b in enumerate(self.trace)]


def plan(case: Case, G: Generator, optimizer: str = "l2o", meta=None, steps: int = 100, seed: int = 0,
         flex: FlexTerm | None = None, lambda_z: float = LAMBDA_Z, lambda_mu: float = LAMBDA_MU,
         eta: float = 1e-2, bias_correction: str = "geometric", hyper: dict | None = None) -> PlanResult:
    """Optimise phi for ``steps`` updates; trace row k holds L_plan after the k-th update."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if optimizer == "l2o" and meta is None:
        raise ValueError("l2o planning needs meta-optimizer parameters")
    obj = Objective(case, G, lambda_z, lambda_mu, flex)
    phi0 = PlanParameters.init(case, seed)
    x = phi0.flat()
    t0 = time.perf_counter()
    if optimizer == "l2o":
        opt = LearnedOptimizer({k: np.asarray(v) for k, v in meta.items()}, x.size, phi0.segments, eta,
                               bias_correction)
    elif optimizer not in BASELINES:
        raise ValueError(f"unknown optimizer {optimizer!r}")
    state: dict = {}
    trace: list[PlanLossBreakdown] = []
    initial, g = obj(phi0)
    for k in range(steps):
        if optimizer == "l2o":
            with ad.no_grad():
                x = opt.step(ad.Tensor(x), g).data
        else:
            x, state = baseline_step(optimizer, x, g, state, hyper)
        last = k == steps - 1
        br, g = obj(phi0.unflat(x), need_grad=not last)
        trace.append(br)
    seconds = time.perf_counter() - t0
    phi = phi0.unflat(x)
    with ad.no_grad():
        f = generate_one_shot(G, phi.z).data
        mu = mu_from_raw(phi.mu_raw, case.constraints).data
    dose = compute_dose(case.operator, f, mu)
    return PlanResult(Plan(f, mu, Provenance.GENERATED), phi, dose, trace, initial, trace[-1], seconds,
                      optimizer, steps)


@dataclass
class Rollout:
    losses: list[float]
    phi: np.ndarray
    outer: ad.Tensor  # differentiable w.r.t. meta params through the update chain


def inner_rollout(case: Case, G: Generator, meta, phi0: PlanParameters, k_i: int, window: int = 5,
                  eta: float = 1e-2, bias_correction: str = "geometric", pinned=None,
                  objective: Objective | None = None, frozen_grads: list[np.ndarray] | None = None) -> Rollout:
    """Unroll k_i meta-optimizer steps; the outer loss averages L_plan over the last ``window`` iterates.

    Gradients g_k enter as constants, so d(outer)/d(meta) is carried by the
    surrogate mean_k <stopgrad(g_k), phi_k>, which has the same first-order
    meta-gradient as mean_k L_plan(phi_k) under that truncation.  With ``frozen_grads``
    (k_i + 1 arrays) the objective is not evaluated at all and the rollout is a
    pure function of the meta weights.
    """
    if k_i < 1:
        raise ValueError("k_i must be >= 1")
    if frozen_grads is not None and len(frozen_grads) != k_i + 1:
        raise ValueError("frozen_grads needs k_i + 1 entries")
    obj = objective or Objective(case, G)
    x = ad.Tensor(phi0.flat())
    opt = LearnedOptimizer(meta, x.size, phi0.segments, eta, bias_correction, pinned)
    losses = []
    surrogate = []
    window = min(window, k_i + 1)
    for k in range(k_i + 1):
        if frozen_grads is None:
            br, g = obj(phi0.unflat(x.data))
            losses.append(br.total)
        else:
            g = np.asarray(frozen_grads[k], dtype=np.float64)
        if k >= k_i + 1 - window:
            surrogate.append(ad.sum_(ad.mul(x, g)))
        if k < k_i:
            x = opt.step(x, g)
    outer = ad.mul(sum_tensors(surrogate), 1.0 / len(surrogate))
    return Rollout(losses, x.data, outer)


def sum_tensors(ts):
    out = ts[0]
    for t in ts[1:]:
        out = ad.add(out, t)
    return out


@dataclass
class MetaTrainResult:
    meta: dict[str, np.ndarray]  # latest weights; training resumes from these
    history: list[dict] = field(default_factory=list)
    opt: Adam | None = None
    best: dict[str, np.ndarray] | None = None  # lowest validation score so far
    best_step: int = 0
    validation: list[dict] = field(default_factory=list)

    @property
    def selected(self) -> dict[str, np.ndarray]:
        """Weights to plan with: the best validated snapshot, else the latest."""
        return self.meta if self.best is None else self.best


def validation_score(meta, cases, G: Generator, steps: int = 100, eta: float = 1e-2,
                     bias_correction: str = "geometric") -> float:
    """Mean final L_plan of full-length planning runs (seed j on the j-th case)."""
    return float(np.mean([plan(c, G, "l2o", meta=meta, steps=steps, seed=j, eta=eta,
                               bias_correction=bias_correction).final.total for j, c in enumerate(cases)]))


def meta_train(cases, G: Generator, K0: int, k_i: int = 20, seed: int = 0, lr: float = 1e-3, window: int = 5,
               eta: float = 1e-2, hidden: int = 16, features: int = 8, bias_correction: str = "geometric",
               resume: MetaTrainResult | None = None, log_every: int = 0, validation=None,
               validate_every: int = 30, validate_steps: int = 100) -> MetaTrainResult:
    """K0 outer steps, each on the next case with fresh phi_0 (z ~ N(0, I), mu_raw = 0).

    The truncated meta-gradient only sees k_i inner steps and gets the sign of
    d(outer)/d(beta) wrong on planning cases (constant gradients cannot show
    momentum overshoot), so beta drifts upward and long runs can end worse than
    they passed through.  With ``validation`` cases the weights are scored by
    full-length planning every ``validate_every`` steps (and at the start and
    end) and the best snapshot is kept in ``best``.
    """
    if resume is None:
        res = MetaTrainResult(init_meta_params(rng.stream(seed, rng.META_INIT), hidden, features))
    else:
        res = resume
    if res.opt is None:
        res.opt = Adam(res.meta, lr=lr)
    cases = list(cases)
    validation = list(validation or [])
    if K0 > 0 and not cases:
        raise ValueError("meta_train needs at least one case")
    if validate_every < 1:
        raise ValueError("validate_every must be >= 1")

    def check(step):
        if not validation or any(v["step"] == step for v in res.validation):
            return
        score = validation_score(res.meta, validation, G, validate_steps, eta, bias_correction)
        res.validation.append({"step": step, "score": score})
        if res.best is None or score < min(v["score"] for v in res.validation[:-1]):
            res.best = {k: v.copy() for k, v in res.meta.items()}
            res.best_step = step
        log.info("meta step %d validation %.4f (best at %d)", step, score, res.best_step)

    start = len(res.history)
    check(start)
    for step in range(start, start + K0):
        case = cases[step % len(cases)]
        g = rng.stream(seed, rng.META_TRAIN, step)
        c = case.constraints
        phi0 = PlanParameters(g.standard_normal((case.arc.n_cp, c.n_rows, c.n_cols)), np.zeros(case.arc.n_cp))
        meta = {k: ad.Tensor(v, requires_grad=True) for k, v in res.meta.items()}
        roll = inner_rollout(case, G, meta, phi0, k_i, window, eta, bias_correction)
        grads = ad.grad(roll.outer, meta.values())
        if not all(np.all(np.isfinite(x)) for x in grads):
            raise RolloutError(f"non-finite meta-gradient at outer step {step}")
        res.opt.step(dict(zip(meta.keys(), grads)))
        tail = roll.losses[-window:]
        res.history.append({"step": step + 1, "case": case.case_id, "outer_loss": float(np.mean(tail)),
                            "first_loss": roll.losses[0], "last_loss": roll.losses[-1]})
        if log_every and (step + 1) % log_every == 0:
            log.info("meta step %d outer %.4f", step + 1, res.history[-1]["outer_loss"])
        if (step + 1) % validate_every == 0:
            check(step + 1)
    check(start + K0)
    return res
