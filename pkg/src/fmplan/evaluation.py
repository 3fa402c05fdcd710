"""Per-plan metric records against a case's target dose."""
from __future__ import annotations

import numpy as np

from .domain import Case
from .dose import compute_dose
from .metrics import dvh, frechet_proxy, homogeneity_index, mae, psnr, ssim

METRIC_FIELDS = ("mae", "mae_ptv", "mae_oars", "psnr", "ssim", "hi", "frechet")


def dose_metrics(case: Case, dose: np.ndarray, bins: int = 512) -> dict:
    p = case.phantom
    target = case.target_dose
    return {
        "mae": mae(dose, target, p.body_mask),
        "mae_ptv": mae(dose, target, p.ptv_mask),
        "mae_oars": mae(dose, target, p.oar_union),
        "psnr": psnr(dose, target),
        "ssim": ssim(dose, target),
        "hi": homogeneity_index(dvh(dose, p.ptv_mask, bins)),
    }


def plan_metrics(case: Case, fluence: np.ndarray, mu: np.ndarray, bins: int = 512) -> dict:
    """Dose metrics of (fluence, mu) plus the Frechet proxy of its CP maps vs the reference plan's."""
    dose = compute_dose(case.operator, fluence, mu)
    rec = dose_metrics(case, dose, bins)
    rec["frechet"] = frechet_proxy(np.asarray(fluence), case.reference_plan.fluence)
    rec["oar_mean"] = float(dose[case.phantom.oar_union].mean())
    rec["case_id"] = case.case_id
    return rec
