"""Rule-based MLC leaf sequencing: one aperture per control point, travel-limited, with an auditor."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .domain import MachineConstraints, Plan

TOL = 1e-9


@dataclass
class Aperture:
    left: np.ndarray  # (n_rows,) fractional column positions
    right: np.ndarray
    intensity: float
    closed: np.ndarray  # (n_rows,) bool

    @property
    def open(self) -> np.ndarray:
        return ~self.closed


@dataclass
class SequencedPlan:
    apertures: list[Aperture]
    mu: np.ndarray
    f_ls: np.ndarray  # (n_cp, n_rows, n_cols)

    @property
    def leaves(self) -> np.ndarray:
        return np.stack([np.stack([a.left, a.right], axis=1) for a in self.apertures])


@dataclass(frozen=True)
class Violation:
    kind: str  # travel | gap | bounds | mu_bound | mu_delta
    cp: int
    row: int = -1
    detail: str = field(default="", compare=False)


def longest_run(mask: np.ndarray) -> tuple[int, int] | None:
    """[start, end) of the longest run of True; the leftmost wins ties."""
    best = None
    start = None
    for i, on in enumerate(np.append(mask, False)):
        if on and start is None:
            start = i
        elif not on and start is not None:
            if best is None or i - start > best[1] - best[0]:
                best = (start, i)
            start = None
    return best


def sequence_cp(f_cp: np.ndarray, c: MachineConstraints, prev: Aperture | None = None) -> Aperture:
    f_cp = np.asarray(f_cp, dtype=np.float64)
    n_rows, n_cols = f_cp.shape
    gmax = float(f_cp.max()) if f_cp.size else 0.0
    left = np.zeros(n_rows)
    right = np.zeros(n_rows)
    closed = np.ones(n_rows, dtype=bool)
    open_vals = []
    for r in range(n_rows):
        row = f_cp[r]
        m = float(row.max())
        if gmax <= 0.0 or m < 1e-6 * gmax:
            continue
        run = longest_run(row > 0.5 * m)
        if run is None:
            continue
        left[r], right[r] = run
        closed[r] = False
        open_vals.append(row[run[0]:run[1]])
    intensity = 0.0
    if open_vals:
        vals = np.concatenate(open_vals)
        # a flat aperture gives its value back exactly rather than a rounded mean
        intensity = float(vals[0]) if vals.min() == vals.max() else float(vals.mean())

    t = c.max_leaf_travel_per_cp
    gap = c.min_gap
    for r in np.flatnonzero(~closed):
        if prev is not None and not prev.closed[r]:
            left[r] = np.clip(left[r], prev.left[r] - t, prev.left[r] + t)
            right[r] = np.clip(right[r], prev.right[r] - t, prev.right[r] + t)
        left[r] = np.clip(left[r], 0.0, n_cols - gap)
        if right[r] < left[r] + gap:
            right[r] = left[r] + gap  # repair by opening the right leaf
        right[r] = min(right[r], float(n_cols))
    return Aperture(left, right, intensity, closed)


def coverage(ap: Aperture, n_cols: int) -> np.ndarray:
    """Fraction of each cell [col, col+1) covered by [left, right); closed rows are zero."""
    cols = np.arange(n_cols, dtype=np.float64)
    lo = np.maximum(ap.left[:, None], cols[None, :])
    hi = np.minimum(ap.right[:, None], cols[None, :] + 1.0)
    cov = np.clip(hi - lo, 0.0, 1.0)
    cov[ap.closed] = 0.0
    return cov


def reconstruct(apertures: list[Aperture], n_cols: int) -> np.ndarray:
    return np.stack([ap.intensity * coverage(ap, n_cols) for ap in apertures])


def clamp_mu(mu: np.ndarray, c: MachineConstraints) -> np.ndarray:
    out = np.clip(np.asarray(mu, dtype=np.float64), c.mu_min, c.mu_max)
    for k in range(1, out.size):
        out[k] = np.clip(out[k], out[k - 1] - c.max_mu_delta_per_cp, out[k - 1] + c.max_mu_delta_per_cp)
    return out


def sequence_plan(plan: Plan, c: MachineConstraints) -> SequencedPlan:
    apertures = []
    prev = None
    for f_cp in np.asarray(plan.fluence):
        prev = sequence_cp(f_cp, c, prev)
        apertures.append(prev)
    return SequencedPlan(apertures, clamp_mu(plan.mu, c), reconstruct(apertures, c.n_cols))


def validate_deliverability(sp: SequencedPlan, c: MachineConstraints) -> list[Violation]:
    out: list[Violation] = []
    t = c.max_leaf_travel_per_cp
    for k, ap in enumerate(sp.apertures):
        for r in range(len(ap.left)):
            if ap.closed[r]:
                continue
            lft, rgt = ap.left[r], ap.right[r]
            if lft < -TOL or rgt > c.n_cols + TOL or lft > rgt + TOL:
                out.append(Violation("bounds", k, r, f"[{lft}, {rgt}]"))
            if rgt - lft < c.min_gap - TOL:
                out.append(Violation("gap", k, r, f"gap {rgt - lft:.4g} < {c.min_gap}"))
            if k > 0 and not sp.apertures[k - 1].closed[r]:
                p = sp.apertures[k - 1]
                move = max(abs(lft - p.left[r]), abs(rgt - p.right[r]))
                if move > t + TOL:
                    out.append(Violation("travel", k, r, f"move {move:.4g} > {t}"))
    mu = np.asarray(sp.mu)
    for k, m in enumerate(mu):
        if m < c.mu_min - TOL or m > c.mu_max + TOL:
            out.append(Violation("mu_bound", k, detail=f"MU {m:.4g}"))
        if k > 0 and abs(m - mu[k - 1]) > c.max_mu_delta_per_cp + TOL:
            out.append(Violation("mu_delta", k, detail=f"dMU {m - mu[k - 1]:.4g}"))
    return out


def relative_reconstruction_error(f: np.ndarray, f_ls: np.ndarray) -> float:
    """Mean over CPs of ||f_ls - f||_1 / ||f||_1."""
    f, f_ls = np.asarray(f), np.asarray(f_ls)
    num = np.abs(f_ls - f).reshape(len(f), -1).sum(axis=1)
    den = np.abs(f).reshape(len(f), -1).sum(axis=1)
    return float(np.mean(num / np.maximum(den, 1e-12)))


def post_ls_metrics(case, sp: SequencedPlan, pre: dict | None = None) -> dict:
    """Metrics of the delivered (sequenced) plan; carries the pre-LS record alongside when given."""
    from .evaluation import plan_metrics

    rec = plan_metrics(case, sp.f_ls, sp.mu)
    rec["stage"] = "post_ls"
    if pre is not None:
        rec["pre"] = pre
    return rec
