"""Synthetic patient and machine world: phantoms, arcs, machine limits and deliverable plans."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import rng

GRID_SHAPE = (64, 64, 16)
BODY_MU = 0.02


@dataclass(frozen=True)
class MachineConstraints:
    n_rows: int = 16
    n_cols: int = 24
    max_leaf_travel_per_cp: float = 3.0
    min_gap: float = 1.0
    mu_min: float = 0.0
    mu_max: float = 10.0
    max_mu_delta_per_cp: float = 2.0

    def __post_init__(self):
        if not (0 < self.min_gap < self.n_cols):
            raise ValueError("min_gap must lie in (0, n_cols)")
        if self.max_leaf_travel_per_cp < 0:
            raise ValueError("max_leaf_travel_per_cp must be non-negative")
        if self.mu_min < 0 or self.mu_max <= self.mu_min:
            raise ValueError("need 0 <= mu_min < mu_max")


@dataclass(frozen=True)
class Arc:
    n_cp: int = 24

    def __post_init__(self):
        if self.n_cp < 2:
            raise ValueError("an arc needs at least two control points")

    @property
    def gantry_angles(self) -> np.ndarray:
        """Degrees, clockwise, evenly spanning [0, 345]."""
        return np.linspace(0.0, 345.0, self.n_cp)


@dataclass
class Phantom:
    mu: np.ndarray  # (64, 64, 16) attenuation per voxel length
    ptv_mask: np.ndarray
    oar_masks: list[np.ndarray]
    body_mask: np.ndarray
    seed: int

    @property
    def oar_union(self) -> np.ndarray:
        out = np.zeros_like(self.body_mask)
        for m in self.oar_masks:
            out |= m
        return out


class Provenance(str, Enum):
    SYNTHETIC = "synthetic-ground-truth"
    GENERATED = "generated"
    SEQUENCED = "sequenced"


@dataclass
class Plan:
    fluence: np.ndarray  # (n_cp, n_rows, n_cols), >= 0
    mu: np.ndarray  # (n_cp,)
    provenance: Provenance = Provenance.SYNTHETIC
    leaves: np.ndarray | None = field(default=None, repr=False)  # (n_cp, n_rows, 2) when known


def _ellipsoid(shape, center, radii) -> np.ndarray:
    idx = np.indices(shape, dtype=np.float64)
    r = np.zeros(shape)
    for ax in range(3):
        r += ((idx[ax] - center[ax]) / radii[ax]) ** 2
    return r <= 1.0


def make_phantom(seed: int) -> Phantom:
    """Elliptic-cylinder body with an ellipsoidal PTV near isocentre and two abutting OARs."""
    g = rng.stream(seed, rng.PHANTOM)
    nx, ny, nz = GRID_SHAPE
    cx, cy = (nx - 1) / 2.0, (ny - 1) / 2.0

    ax_a, ax_b = g.uniform(24.0, 30.0), g.uniform(17.0, 23.0)
    xx, yy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    body2d = ((xx - cx) / ax_a) ** 2 + ((yy - cy) / ax_b) ** 2 <= 1.0
    body = np.repeat(body2d[:, :, None], nz, axis=2)

    pc = np.array([cx + g.uniform(-4, 4), cy + g.uniform(-3, 3), (nz - 1) / 2.0 + g.uniform(-1.5, 1.5)])
    pr = np.array([g.uniform(5.0, 8.0), g.uniform(4.0, 6.5), g.uniform(3.0, 5.0)])
    ptv = _ellipsoid(GRID_SHAPE, pc, pr) & body

    oars = []
    for side in (+1.0, -1.0):  # anterior (bladder-like), posterior (rectum-like)
        rr = np.array([g.uniform(4.0, 7.0), g.uniform(3.0, 5.0), g.uniform(3.0, 5.0)])
        oc = pc + np.array([g.uniform(-2, 2), side * (pr[1] + rr[1] - 1.0), g.uniform(-1, 1)])
        oar = _ellipsoid(GRID_SHAPE, oc, rr) & body & ~ptv
        oars.append(oar)
    oars[1] &= ~oars[0]

    mu = np.where(body, BODY_MU, 0.0)
    return Phantom(mu=mu, ptv_mask=ptv, oar_masks=oars, body_mask=body, seed=int(seed))


def _leaf_walk(g: np.random.Generator, n_cp: int, c: MachineConstraints) -> tuple[np.ndarray, np.ndarray]:
    """Integer, mean-reverting left/right leaf trajectories for one leaf pair."""
    t = int(np.floor(c.max_leaf_travel_per_cp))
    gap = int(np.ceil(c.min_gap))
    hi = c.n_cols
    centre = c.n_cols / 2.0 + g.uniform(-3.0, 3.0)
    half = g.uniform(max(gap, 2.0) / 2.0 + 0.5, c.n_cols / 3.5)
    home_l = int(np.clip(round(centre - half), 0, hi - gap))
    home_r = int(np.clip(round(centre + half), home_l + gap, hi))
    left = np.empty(n_cp, dtype=np.int64)
    right = np.empty(n_cp, dtype=np.int64)
    left[0], right[0] = home_l, home_r
    vl = vr = 0.0
    for k in range(1, n_cp):
        vl = 0.6 * vl + g.normal(0.0, 1.0) - 0.25 * (left[k - 1] - home_l)
        vr = 0.6 * vr + g.normal(0.0, 1.0) - 0.25 * (right[k - 1] - home_r)
        lo_l, hi_l = max(0, left[k - 1] - t), min(hi - gap, left[k - 1] + t)
        left[k] = int(np.clip(left[k - 1] + round(vl), lo_l, hi_l))
        lo_r = max(left[k] + gap, right[k - 1] - t)
        hi_r = min(hi, right[k - 1] + t)
        right[k] = int(np.clip(right[k - 1] + round(vr), lo_r, hi_r))
    return left, right


def triangular_smooth(fluence: np.ndarray) -> np.ndarray:
    """Lateral [1, 2, 1]/4 smoothing along the leaf-travel axis with zero padding."""
    p = np.pad(fluence, [(0, 0)] * (fluence.ndim - 1) + [(1, 1)])
    return 0.25 * p[..., :-2] + 0.5 * p[..., 1:-1] + 0.25 * p[..., 2:]


def apertures_to_fluence(leaves: np.ndarray, mu: np.ndarray, n_cols: int) -> np.ndarray:
    """fluence[cp, row, col] = mu[cp] where the cell centre lies inside [left, right)."""
    cols = np.arange(n_cols) + 0.5
    left = leaves[..., 0][..., None]
    right = leaves[..., 1][..., None]
    inside = (cols >= left) & (cols < right)
    return inside * mu[:, None, None]


def sample_deliverable_plan(c: MachineConstraints, arc: Arc, seed: int, smooth: bool = True) -> Plan:
    g = rng.stream(seed, rng.PLAN)
    leaves = np.empty((arc.n_cp, c.n_rows, 2), dtype=np.float64)
    for r in range(c.n_rows):
        left, right = _leaf_walk(g, arc.n_cp, c)
        leaves[:, r, 0] = left
        leaves[:, r, 1] = right

    lo = c.mu_min + 0.1 * (c.mu_max - c.mu_min)
    hi = c.mu_max - 0.1 * (c.mu_max - c.mu_min)
    mu = np.empty(arc.n_cp)
    mu[0] = g.uniform(c.mu_min + 0.3 * (c.mu_max - c.mu_min), c.mu_max - 0.3 * (c.mu_max - c.mu_min))
    step = 0.5 * c.max_mu_delta_per_cp
    for k in range(1, arc.n_cp):
        mu[k] = np.clip(mu[k - 1] + g.uniform(-step, step), lo, hi)

    fluence = apertures_to_fluence(leaves, mu, c.n_cols)
    if smooth:
        fluence = triangular_smooth(fluence)
    return Plan(fluence=fluence, mu=mu, provenance=Provenance.SYNTHETIC, leaves=leaves)


@dataclass
class Case:
    case_id: str
    seed: int
    phantom: Phantom
    arc: Arc
    constraints: MachineConstraints
    target_dose: np.ndarray
    reference_plan: Plan
    attempts: int = 1
    _operator: object = field(default=None, repr=False, compare=False)

    @property
    def operator(self):
        """Deposition operator, built on first use and cached on the case."""
        if self._operator is None:
            from .dose import build_deposition

            self._operator = build_deposition(self.phantom, self.arc, self.constraints)
        return self._operator

    @property
    def prescription(self) -> float:
        """Mean target dose inside the PTV; used as the homogeneity prescription."""
        return float(self.target_dose[self.phantom.ptv_mask].mean())


MAX_CASE_ATTEMPTS = 64


def build_case(seed: int, constraints: MachineConstraints | None = None, arc: Arc | None = None,
               case_id: str | None = None) -> Case:
    """Phantom, arc and a target dose produced by a deliverable plan.

    Geometry and plan are redrawn (attempt counter mixed into the seed) until
    the mean PTV dose exceeds the mean dose of every OAR.
    """
    from .dose import build_deposition, compute_dose

    c = constraints or MachineConstraints()
    arc = arc or Arc()
    for attempt in range(MAX_CASE_ATTEMPTS):
        sub_seed = int(seed) if attempt == 0 else int(seed) * 1000003 + attempt
        phantom = make_phantom(sub_seed)
        plan = sample_deliverable_plan(c, arc, sub_seed)
        op = build_deposition(phantom, arc, c)
        dstar = compute_dose(op, plan.fluence, plan.mu)
        ptv_mean = dstar[phantom.ptv_mask].mean()
        if all(m.any() and ptv_mean > dstar[m].mean() for m in phantom.oar_masks):
            return Case(case_id or f"case{int(seed):05d}", int(seed), phantom, arc, c, dstar, plan,
                        attempt + 1, op)
    raise RuntimeError(f"no admissible case geometry for seed {seed}")
