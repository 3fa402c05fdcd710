"""Optimizer comparisons, the prior ablation and the flexibility study."""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .domain import Case
from .evaluation import METRIC_FIELDS, plan_metrics
from .fmd.distill import Generator
from .l2plan.planner import plan
from .leafseq import sequence_plan, validate_deliverability
from .metrics import paired_t_test
from .objectives import FlexTerm

SUMMARY_FIELDS = METRIC_FIELDS + ("loss",)


def worker_count() -> int:
    """FMPL_THREADS caps the compare worker pool; unset means a single in-process worker."""
    raw = os.environ.get("FMPL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def make_flex(kind: str | None, case: Case, weight: float = 1.0) -> FlexTerm | None:
    if kind in (None, "none"):
        return None
    if kind == "ptv":
        return FlexTerm("ptv", case.phantom.ptv_mask, case.prescription, weight)
    if kind == "oar":
        return FlexTerm("oar", case.phantom.oar_union, 0.0, weight)
    raise ValueError(f"unknown flexibility term {kind!r}")


def _case_rows(case: Case, G: Generator, meta, optimizers, steps_list, seed: int, with_ls: bool,
               timing: bool, bins: int) -> list[dict]:
    rows = []
    for opt in optimizers:
        for steps in steps_list:
            res = plan(case, G, opt, meta=meta if opt == "l2o" else None, steps=steps, seed=seed)
            rec = plan_metrics(case, res.plan.fluence, res.plan.mu, bins)
            base = {"case_id": case.case_id, "optimizer": opt, "steps": steps,
                    "seconds": res.seconds if timing else math.nan, "loss": res.final.total}
            rows.append({**base, **rec, "stage": "pre_ls"})
            if with_ls:
                sp = sequence_plan(res.plan, case.constraints)
                post = plan_metrics(case, sp.f_ls, sp.mu, bins)
                rows.append({**base, **post, "stage": "post_ls",
                             "violations": len(validate_deliverability(sp, case.constraints))})
    return rows


def compare(cases, G: Generator, meta, optimizers, steps_list, seed: int = 0, with_ls: bool = False,
            timing: bool = True, bins: int = 512, workers: int | None = None) -> list[dict]:
    """One record per (case, optimizer, steps[, stage]); sorted by case id so worker order never shows."""
    cases = list(cases)
    if not cases:
        raise ValueError("no cases to compare")
    if "l2o" in optimizers and meta is None:
        raise ValueError("l2o in the comparison needs meta-optimizer parameters")
    workers = worker_count() if workers is None else workers
    args = [(c, G, meta, list(optimizers), list(steps_list), seed, with_ls, timing, bins) for c in cases]
    if workers > 1 and len(cases) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(cases))) as pool:
            chunks = list(pool.map(_case_rows, *zip(*args)))
    else:
        chunks = [_case_rows(*a) for a in args]
    rows = [r for chunk in chunks for r in chunk]
    order = {o: i for i, o in enumerate(optimizers)}
    rows.sort(key=lambda r: (r["case_id"], order[r["optimizer"]], r["steps"], r["stage"]))
    return rows


def summarize(rows: list[dict]) -> list[dict]:
    """Mean and sample std of each metric per (optimizer, steps, stage)."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["optimizer"], r["steps"], r["stage"]), []).append(r)
    out = []
    for (opt, steps, stage), rs in groups.items():
        rec = {"optimizer": opt, "steps": steps, "stage": stage, "n": len(rs)}
        for f in SUMMARY_FIELDS:
            vals = np.array([r[f] for r in rs], dtype=np.float64)
            rec[f"{f}_mean"] = float(vals.mean())
            rec[f"{f}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out.append(rec)
    return out


def pvalues_vs(rows: list[dict], reference: str = "l2o") -> list[dict]:
    """Paired t-tests of every other optimizer against ``reference`` at the same steps and stage."""
    index = {(r["case_id"], r["optimizer"], r["steps"], r["stage"]): r for r in rows}
    keys = sorted({(r["optimizer"], r["steps"], r["stage"]) for r in rows if r["optimizer"] != reference})
    cases = sorted({r["case_id"] for r in rows})
    out = []
    for opt, steps, stage in keys:
        pairs = [(index.get((c, reference, steps, stage)), index.get((c, opt, steps, stage))) for c in cases]
        pairs = [(a, b) for a, b in pairs if a is not None and b is not None]
        for f in SUMMARY_FIELDS:
            try:
                t, p = paired_t_test([a[f] for a, _ in pairs], [b[f] for _, b in pairs])
            except ValueError:
                t, p = math.nan, math.nan
            out.append({"optimizer": opt, "steps": steps, "stage": stage, "metric": f, "t": t, "p": p})
    return out


def total_variation(x: np.ndarray) -> float:
    """Mean absolute difference between consecutive control points."""
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(np.abs(np.diff(x, axis=0))))


ABLATION_CONFIGS = {
    "none": (0.0, 0.0),
    "z": (None, 0.0),
    "mu": (0.0, None),
    "both": (None, None),
}


@dataclass
class AblationRecord:
    config: str
    seed: int
    tv_z: float
    tv_mu: float
    mae_ptv: float
    loss: float


def ablation(case: Case, G: Generator, seeds, optimizer: str = "adam", meta=None, steps: int = 100,
             lambda_z: float = 5.0, lambda_mu: float = 1.0) -> list[AblationRecord]:
    """Plans with each continuity prior switched on or off; None in a config keeps the default weight."""
    out = []
    for seed in seeds:
        for name, (lz, lm) in ABLATION_CONFIGS.items():
            res = plan(case, G, optimizer, meta=meta, steps=steps, seed=seed,
                       lambda_z=lambda_z if lz is None else lz, lambda_mu=lambda_mu if lm is None else lm)
            rec = plan_metrics(case, res.plan.fluence, res.plan.mu)
            out.append(AblationRecord(name, seed, total_variation(res.params.z), total_variation(res.plan.mu),
                                      rec["mae_ptv"], res.final.total))
    return out


def flex_study(case: Case, G: Generator, optimizer: str = "adam", meta=None, steps: int = 100, seed: int = 0,
               weight: float = 1.0) -> dict[str, dict]:
    """Same case and seed planned with no extra term, the PTV homogeneity term and the OAR term."""
    out = {}
    for kind in ("none", "ptv", "oar"):
        res = plan(case, G, optimizer, meta=meta, steps=steps, seed=seed, flex=make_flex(kind, case, weight))
        out[kind] = plan_metrics(case, res.plan.fluence, res.plan.mu)
    return out
