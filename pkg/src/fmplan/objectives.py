"""MAP planning objective: L1 dose fidelity plus L1 continuity priors on z and MU across control points."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

LAMBDA_Z = 5.0
LAMBDA_MU = 1.0

FLEX_KINDS = ("none", "ptv", "oar")


@dataclass
class FlexTerm:
    kind: str  # "ptv" (homogeneity) or "oar" (sparing)
    mask: np.ndarray
    prescription: float = 0.0
    weight: float = 1.0

    def __post_init__(self):
        if self.kind not in ("ptv", "oar"):
            raise ValueError(f"unknown flexibility term {self.kind!r}")
        if self.kind == "ptv" and self.prescription <= 0:
            raise ValueError("ptv homogeneity needs a positive prescription")


@dataclass
class PlanLossBreakdown:
    l_dose: float
    l_cont_z: float
    l_cont_mu: float
    l_extra: float
    total: float
    tensor: ad.Tensor | None = None

    def row(self) -> list[float]:
        return [self.l_dose, self.l_cont_z, self.l_cont_mu, self.total]


def _masked_mean(t: ad.Tensor, mask: np.ndarray) -> ad.Tensor:
    n = int(mask.sum())
    if n == 0:
        raise ValueError("empty mask")
    return ad.mul(ad.sum_(ad.mul(t, mask.astype(np.float64))), 1.0 / n)


def flexibility_term(kind: str, dose, mask: np.ndarray, prescription: float = 0.0) -> ad.Tensor:
    """ptv: mean |D - prescription| over the PTV; oar: mean max(D, 0) over the OARs."""
    dose = ad.as_tensor(dose)
    if kind == "ptv":
        if prescription <= 0:
            raise ValueError("prescription must be positive")
        return _masked_mean(ad.abs_(ad.sub(dose, prescription)), mask)
    if kind == "oar":
        return _masked_mean(ad.relu(dose), mask)
    raise ValueError(f"unknown flexibility term {kind!r}")


def continuity(x) -> ad.Tensor:
    """Mean absolute difference between consecutive control points (axis 0)."""
    x = ad.as_tensor(x)
    n = x.shape[0]
    if n < 2:
        return ad.Tensor(0.0)
    return ad.mean(ad.abs_(ad.sub(x[1:], x[:n - 1])))


def plan_loss(dose, target: np.ndarray, z, mu, lambda_z: float = LAMBDA_Z, lambda_mu: float = LAMBDA_MU,
              flex: FlexTerm | None = None) -> PlanLossBreakdown:
    """Mean-normalised L1 terms; ``tensor`` carries the differentiable total."""
    dose = ad.as_tensor(dose)
    if dose.shape != np.shape(target):
        raise ValueError("dose/target shape mismatch")
    l_dose = ad.mean(ad.abs_(ad.sub(dose, target)))
    l_z = continuity(z)
    l_mu = continuity(mu)
    total = ad.add(ad.add(l_dose, ad.mul(l_z, lambda_z)), ad.mul(l_mu, lambda_mu))
    l_extra = 0.0
    if flex is not None:
        term = flexibility_term(flex.kind, dose, flex.mask, flex.prescription)
        l_extra = float(term.data)
        total = ad.add(total, ad.mul(term, flex.weight))
    return PlanLossBreakdown(float(l_dose.data), float(l_z.data), float(l_mu.data), l_extra,
                             float(total.data), total)
