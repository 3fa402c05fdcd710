"""Linear differentiable dose engine.

Each control point casts parallel rays at its gantry angle.  Fluence row ``r``
deposits into axial slice ``r``; a voxel's weight from a fluence column is the
transmission ``exp(-sum(mu * step))`` marched back toward the source, spread
laterally over neighbouring columns by a Gaussian penumbra.  Slices with
identical attenuation share one sparse matrix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.ndimage import map_coordinates

from . import autodiff as ad
from .domain import Arc, MachineConstraints, Phantom

RAY_STEP = 0.5
PENUMBRA_SIGMA = 1.0
PENUMBRA_HALF_WIDTH = 3


@dataclass
class DepositionOperator:
    """``slice_ops[u]`` maps ``(cp, col)`` fluence entries to the ``nx*ny`` voxels of a slice."""

    slice_ops: list[sp.csr_matrix]
    slice_index: np.ndarray  # slice -> index into slice_ops
    grid_shape: tuple[int, int, int]
    n_cp: int
    n_rows: int
    n_cols: int

    @property
    def fluence_shape(self) -> tuple[int, int, int]:
        return (self.n_cp, self.n_rows, self.n_cols)

    def _groups(self):
        for u, op in enumerate(self.slice_ops):
            rows = np.flatnonzero(self.slice_index == u)
            if rows.size:
                yield op, rows

    def cp_matrix(self, cp: int) -> sp.csr_matrix:
        """Explicit per-CP matrix (all voxels x n_rows*n_cols); used by tests as an independent route."""
        nx, ny, nz = self.grid_shape
        blocks = []
        for r in range(self.n_rows):
            b = self.slice_ops[self.slice_index[r]][:, cp * self.n_cols:(cp + 1) * self.n_cols].tocoo()
            vox = b.row * nz + r
            blocks.append(sp.coo_matrix((b.data, (vox, b.col + r * self.n_cols)),
                                        shape=(nx * ny * nz, self.n_rows * self.n_cols)))
        return sp.csr_matrix(sum(blocks[1:], blocks[0]))


def _transmission(mu2d: np.ndarray, body2d: np.ndarray, theta: float) -> tuple[np.ndarray, np.ndarray]:
    """Transmission and voxel indices for body voxels of one slice at gantry angle ``theta`` (rad)."""
    nx, ny = mu2d.shape
    d = np.array([np.sin(theta), np.cos(theta)])  # propagation direction
    vox = np.argwhere(body2d).astype(np.float64)
    n_samples = int(np.ceil(np.hypot(nx, ny) / RAY_STEP)) + 1
    t = RAY_STEP * (np.arange(n_samples) + 0.5)
    px = vox[:, 0:1] - t[None, :] * d[0]
    py = vox[:, 1:2] - t[None, :] * d[1]
    mus = map_coordinates(mu2d, [px.ravel(), py.ravel()], order=1, mode="constant", cval=0.0)
    depth = mus.reshape(px.shape).sum(axis=1) * RAY_STEP
    return np.exp(-depth), np.flatnonzero(body2d.ravel())


def _slice_operator(mu2d, body2d, angles_deg, n_cols, scale) -> sp.csr_matrix:
    nx, ny = mu2d.shape
    n_cp = len(angles_deg)
    centre = np.array([(nx - 1) / 2.0, (ny - 1) / 2.0])
    col_width = nx / n_cols
    rows, cols, vals = [], [], []
    vox_xy = np.argwhere(body2d).astype(np.float64) - centre
    offsets = np.arange(-PENUMBRA_HALF_WIDTH, PENUMBRA_HALF_WIDTH + 1)
    for cp, ang in enumerate(np.deg2rad(angles_deg)):
        trans, flat = _transmission(mu2d, body2d, ang)
        lateral = np.array([np.cos(ang), -np.sin(ang)])
        u = vox_xy @ lateral / col_width + n_cols / 2.0  # fractional column coordinate
        base = np.floor(u).astype(np.int64)
        cand = base[:, None] + offsets[None, :]
        kern = np.exp(-0.5 * ((cand + 0.5 - u[:, None]) / PENUMBRA_SIGMA) ** 2)
        kern /= kern.sum(axis=1, keepdims=True)
        keep = (cand >= 0) & (cand < n_cols)
        w = scale * trans[:, None] * kern
        vi = np.broadcast_to(flat[:, None], cand.shape)
        rows.append(vi[keep])
        cols.append(cp * n_cols + cand[keep])
        vals.append(w[keep])
    m = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(nx * ny, n_cp * n_cols))
    m = m.tocsr()
    m.sum_duplicates()
    m.sort_indices()
    return m


def dose_scale(arc: Arc, c: MachineConstraints) -> float:
    """Normalises dose so a mid-range MU on a mid-range fluence gives O(1) values."""
    mu_ref = 0.5 * (c.mu_min + c.mu_max)
    return 1.0 / (arc.n_cp * mu_ref * mu_ref)


def build_deposition(p: Phantom, arc: Arc, c: MachineConstraints) -> DepositionOperator:
    nx, ny, nz = p.mu.shape
    if c.n_rows != nz:
        raise ValueError(f"n_rows ({c.n_rows}) must equal the number of slices ({nz})")
    angles = arc.gantry_angles
    scale = dose_scale(arc, c)
    ops: list[sp.csr_matrix] = []
    keys: dict[bytes, int] = {}
    index = np.empty(nz, dtype=np.int64)
    for s in range(nz):
        mu2d = np.where(p.body_mask[:, :, s], p.mu[:, :, s], 0.0)
        key = mu2d.tobytes() + p.body_mask[:, :, s].tobytes()
        if key not in keys:
            keys[key] = len(ops)
            ops.append(_slice_operator(mu2d, p.body_mask[:, :, s], angles, c.n_cols, scale))
        index[s] = keys[key]
    return DepositionOperator(ops, index, (nx, ny, nz), arc.n_cp, c.n_rows, c.n_cols)


def _stack(A: DepositionOperator, f: np.ndarray, mu: np.ndarray) -> np.ndarray:
    # (n_cp, n_rows, n_cols) -> (n_cp*n_cols, n_rows)
    x = mu[:, None, None] * f
    return x.transpose(0, 2, 1).reshape(A.n_cp * A.n_cols, A.n_rows)


def compute_dose(A: DepositionOperator, f: np.ndarray, mu: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if f.shape != A.fluence_shape or mu.shape != (A.n_cp,):
        raise ValueError(f"shape mismatch: fluence {f.shape}, mu {mu.shape}, expected {A.fluence_shape}")
    if np.any(mu < 0):
        raise ValueError("negative MU")
    x = _stack(A, f, mu)
    nx, ny, nz = A.grid_shape
    out = np.zeros((nx * ny, nz))
    for op, rows in A._groups():
        out[:, rows] = op @ x[:, rows]
    return out.reshape(nx, ny, nz)


def _apply_transpose(A: DepositionOperator, g: np.ndarray) -> np.ndarray:
    """A^T g arranged as (n_cp, n_rows, n_cols), without the MU factor."""
    nx, ny, nz = A.grid_shape
    g2 = np.asarray(g, dtype=np.float64).reshape(nx * ny, nz)
    h = np.zeros((A.n_cp * A.n_cols, A.n_rows))
    for op, rows in A._groups():
        h[:, rows] = op.T @ g2[:, rows]
    return h.reshape(A.n_cp, A.n_cols, A.n_rows).transpose(0, 2, 1)


def dose_adjoint(A: DepositionOperator, g: np.ndarray, f: np.ndarray, mu: np.ndarray):
    """Returns (d/df, d/dmu) of <compute_dose(A, f, mu), g>."""
    if np.shape(g) != A.grid_shape:
        raise ValueError(f"gradient shape {np.shape(g)} != {A.grid_shape}")
    h = _apply_transpose(A, g)
    df = np.asarray(mu)[:, None, None] * h
    dmu = np.einsum("crk,crk->c", np.asarray(f), h)
    return df, dmu


def dose_tensor(A: DepositionOperator, f: ad.Tensor, mu: ad.Tensor) -> ad.Tensor:
    """compute_dose as a graph node with the hand-written adjoint."""
    f, mu = ad.as_tensor(f), ad.as_tensor(mu)
    out = compute_dose(A, f.data, mu.data)

    def vjp(g):
        df, dmu = dose_adjoint(A, g, f.data, mu.data)
        return df, dmu

    return ad.custom_op([f, mu], out, vjp, "dose")
