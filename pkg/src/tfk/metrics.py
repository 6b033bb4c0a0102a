"""Overlap and fidelity metrics: Dice, masked PSNR, windowed 3D MS-SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import EmptyMask, GridTooSmall, ShapeMismatch, TooFewTimePoints
from .grid import LabelMask, ScalarField3D, pairwise_sum

PSNR_CAP = 99.0
# Conventional five-scale weights; shorter pyramids use a renormalised prefix.
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass(frozen=True)
class MetricRecord:
    name: str
    value: float
    mask_voxels: int
    t_days: Optional[float] = None
    modality: Optional[str] = None

    def row(self) -> list:
        return [self.name, repr(float(self.value)), self.mask_voxels,
                "" if self.t_days is None else repr(float(self.t_days)),
                "" if self.modality is None else self.modality]


def _region(x) -> np.ndarray:
    if isinstance(x, LabelMask):
        return x.whole_tumor()
    return np.asarray(x, dtype=bool).reshape(-1)


def dice(a, b) -> float:
    """2|A n B| / (|A| + |B|); 1.0 when both regions are empty.

    Accepts label masks (whole-tumor region is used) or boolean arrays.
    """
    ra, rb = _region(a), _region(b)
    if ra.shape != rb.shape:
        raise ShapeMismatch(f"region sizes differ: {ra.size} vs {rb.size}")
    na, nb = int(ra.sum()), int(rb.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(ra & rb)) / (na + nb)


def _values(x) -> np.ndarray:
    if isinstance(x, ScalarField3D):
        return x.values
    return np.asarray(x, dtype=np.float64)


def psnr(a, b, mask=None, data_max: float = 1.0) -> float:
    """10 log10(data_max^2 / MSE) over the masked voxels, capped at 99 dB."""
    va, vb = _values(a).reshape(-1), _values(b).reshape(-1)
    if va.shape != vb.shape:
        raise ShapeMismatch(f"field sizes differ: {va.size} vs {vb.size}")
    if not data_max > 0:
        raise ValueError("data_max must be positive")
    sel = np.ones(va.shape, bool) if mask is None else np.asarray(mask, bool).reshape(-1)
    n = int(sel.sum())
    if n == 0:
        raise EmptyMask("PSNR mask selects no voxels")
    diff = va[sel] - vb[sel]
    mse = pairwise_sum(diff * diff) / n
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_max ** 2 / mse))


def _gauss_kernel(window: int, sigma: float) -> np.ndarray:
    r = np.arange(window) - (window - 1) / 2.0
    k = np.exp(-r ** 2 / (2.0 * sigma ** 2))
    return k / k.sum()


def _filter_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable correlation over every axis, keeping only fully covered voxels."""
    r = k.size // 2
    for axis in range(x.ndim):
        x = ndimage.correlate1d(x, k, axis=axis, mode="constant", cval=0.0)
        x = np.take(x, np.arange(r, x.shape[axis] - r), axis=axis)
    return x


def _ssim_terms(a, b, k, c1, c2) -> tuple[float, float]:
    mu_a, mu_b = _filter_valid(a, k), _filter_valid(b, k)
    s_aa = _filter_valid(a * a, k) - mu_a ** 2
    s_bb = _filter_valid(b * b, k) - mu_b ** 2
    s_ab = _filter_valid(a * b, k) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    cs = (2 * s_ab + c2) / (s_aa + s_bb + c2)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def _downsample(x: np.ndarray) -> np.ndarray:
    sl = tuple(slice(0, (n // 2) * 2) for n in x.shape)
    x = x[sl]
    nz, ny, nx = x.shape
    return x.reshape(nz // 2, 2, ny // 2, 2, nx // 2, 2).mean(axis=(1, 3, 5))


def _signed_pow(x: float, w: float) -> float:
    return math.copysign(abs(x) ** w, x)


def ms_ssim(a, b, levels: int = 3, window: int = 7, sigma: float = 1.5,
            data_range: float = 1.0) -> float:
    """Multi-scale SSIM of two 3D volumes with a Gaussian window.

    Contrast-structure terms of the first ``levels - 1`` scales and the full
    SSIM of the coarsest scale are combined as a weighted product. Terms are
    raised to their weight with the sign kept, so anti-correlated volumes give
    a negative score rather than NaN.
    """
    if isinstance(a, ScalarField3D):
        if not isinstance(b, ScalarField3D) or a.spec != b.spec:
            raise ShapeMismatch("ms_ssim needs fields on the same grid")
        a, b = a.array, b.array
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3:
        raise ShapeMismatch(f"ms_ssim needs equal 3D shapes, got {a.shape} and {b.shape}")
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    if not 1 <= levels <= len(MS_SSIM_WEIGHTS):
        raise ValueError(f"levels must be in 1..{len(MS_SSIM_WEIGHTS)}")
    need = window * 2 ** (levels - 1)
    if min(a.shape) < need:
        raise GridTooSmall(f"{levels} levels with window {window} need every dimension >= {need}, "
                           f"got {a.shape}")
    w = np.array(MS_SSIM_WEIGHTS[:levels])
    w = w / w.sum()
    k = _gauss_kernel(window, sigma)
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    out = 1.0
    for lvl in range(levels):
        ssim, cs = _ssim_terms(a, b, k, c1, c2)
        out *= _signed_pow(ssim if lvl == levels - 1 else cs, w[lvl])
        if lvl < levels - 1:
            a, b = _downsample(a), _downsample(b)
    return float(out)


def ssim_single_scale(a, b, window: int = 7, sigma: float = 1.5,
                      data_range: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    k = _gauss_kernel(window, sigma)
    return _ssim_terms(a, b, k, (0.01 * data_range) ** 2, (0.03 * data_range) ** 2)[0]


def temporal_curves(bundle) -> list[dict]:
    """Per time point and modality: Dice vs conditioning and consecutive nontumor PSNR.

    Rows come out sorted by (t_days, modality code); ``psnr`` is None at the
    first time point.
    """
    entries = list(bundle.entries)
    if len({e.t_days for e in entries}) < 2:
        raise TooFewTimePoints("temporal curves need at least two time points")
    rows = []
    for e in sorted(entries, key=lambda e: (e.t_days, int(e.modality))):
        rows.append({"t_days": e.t_days, "modality": e.modality.name,
                     "dice": e.dice_vs_conditioning, "psnr": e.psnr_nontumor_vs_previous})
    return rows
