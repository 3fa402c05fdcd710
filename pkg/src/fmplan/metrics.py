"""Dose and image metrics, DVH analysis, the Frechet feature distance and paired t-tests."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate
from scipy.special import betainc

PSNR_INF = float("inf")


def mae(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("shape mismatch")
    diff = np.abs(pred - target)
    if mask is not None:
        if not mask.any():
            raise ValueError("empty mask")
        diff = diff[mask]
    return float(diff.mean())


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    """10 log10(peak^2 / MSE) with peak = max(target); identical inputs give +inf."""
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return PSNR_INF
    peak = float(target.max())
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_2d(a: np.ndarray, b: np.ndarray, data_range: float, win: np.ndarray, k1: float, k2: float) -> float:
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    half = win.shape[0] // 2

    def filt(x):
        return correlate(x, win, mode="constant")[half:-half, half:-half]

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a ** 2
    sbb = filt(b * b) - mu_b ** 2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray, k1: float = 0.01, k2: float = 0.03) -> float:
    """Gaussian-window (7x7, sigma 1.5) SSIM over valid windows, averaged over axial slices.

    Dynamic range is max(b) - min(b) over the whole volume.  2-D inputs are
    treated as a single slice.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    data_range = float(b.max() - b.min())
    if data_range == 0.0:
        data_range = 1.0
    win = gaussian_window()
    return float(np.mean([_ssim_2d(a[..., s], b[..., s], data_range, win, k1, k2) for s in range(a.shape[-1])]))


@dataclass
class DVHCurve:
    doses: np.ndarray  # bin doses, uniform from 0 to max
    volume: np.ndarray  # fraction of structure receiving >= dose


def dvh(dose: np.ndarray, mask: np.ndarray, bins: int = 512, max_dose: float | None = None) -> DVHCurve:
    vals = np.asarray(dose, dtype=np.float64)[mask]
    if vals.size == 0:
        raise ValueError("empty mask")
    top = float(vals.max()) if max_dose is None else float(max_dose)
    doses = np.linspace(0.0, top, bins)
    s = np.sort(vals)
    volume = 1.0 - np.searchsorted(s, doses, side="left") / s.size
    return DVHCurve(doses, volume)


def dose_at_volume(curve: DVHCurve, q: float) -> float:
    """D_q%: dose received by at least q percent of the structure, linearly interpolated."""
    frac = q / 100.0
    v, d = curve.volume, curve.doses
    above = np.flatnonzero(v >= frac)
    if above.size == 0:
        return 0.0
    j = above[-1]
    if j == len(d) - 1 or v[j] == frac:
        return float(d[j])
    v0, v1 = v[j], v[j + 1]
    return float(d[j] + (v0 - frac) / (v0 - v1) * (d[j + 1] - d[j]))


def homogeneity_index(curve: DVHCurve) -> float:
    """(D2% - D98%) / D50%."""
    d50 = dose_at_volume(curve, 50.0)
    if d50 <= 0:
        raise ValueError("D50% must be positive")
    return (dose_at_volume(curve, 2.0) - dose_at_volume(curve, 98.0)) / d50


def fluence_features(maps: np.ndarray) -> np.ndarray:
    """[mean, std, row means, column means, mean |gradient|] per map."""
    maps = np.asarray(maps, dtype=np.float64)
    n = maps.shape[0]
    flat = maps.reshape(n, -1)
    gy = np.abs(np.diff(maps, axis=1)).reshape(n, -1)
    gx = np.abs(np.diff(maps, axis=2)).reshape(n, -1)
    grad = (gy.sum(axis=1) + gx.sum(axis=1)) / (gy.shape[1] + gx.shape[1])
    return np.concatenate([flat.mean(axis=1, keepdims=True), flat.std(axis=1, keepdims=True),
                           maps.mean(axis=2), maps.mean(axis=1), grad[:, None]], axis=1)


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^1/2) via eigh of S1^1/2 S2 S1^1/2."""
    r1 = _sqrt_psd(cov1)
    mid = r1 @ cov2 @ r1
    w = np.linalg.eigvalsh(0.5 * (mid + mid.T))
    tr_sqrt = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    diff = np.asarray(mu1) - np.asarray(mu2)
    return float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_sqrt)


def feature_stats(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return feats.mean(axis=0), np.cov(feats, rowvar=False)


def frechet_proxy(set_a: np.ndarray, set_b: np.ndarray) -> float:
    if len(set_a) < 16 or len(set_b) < 16:
        raise ValueError("frechet_proxy needs at least 16 maps per set")
    ma, ca = feature_stats(fluence_features(set_a))
    mb, cb = feature_stats(fluence_features(set_b))
    return max(frechet_distance(ma, ca, mb, cb), 0.0)


def student_t_sf_two_sided(t: float, df: int) -> float:
    """Two-sided tail probability P(|T| >= |t|) = I_{df/(df+t^2)}(df/2, 1/2)."""
    x = df / (df + t * t)
    return float(betainc(df / 2.0, 0.5, x))


def paired_t_test(x, y) -> tuple[float, float]:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("paired_t_test needs two equal-length samples with n >= 2")
    d = x - y
    sd = d.std(ddof=1)
    if sd == 0.0:
        raise ValueError("zero variance of paired differences")
    n = d.size
    t = d.mean() * math.sqrt(n) / sd
    return float(t), student_t_sf_two_sided(t, n - 1)
