import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tfk.errors import EmptyMask, GridTooSmall, ShapeMismatch, TooFewTimePoints
from tfk.metrics import PSNR_CAP, dice, ms_ssim, psnr, ssim_single_scale, temporal_curves


def test_dice_examples():
    a = np.zeros(10, bool)
    a[:4] = True
    b = np.zeros(10, bool)
    b[2:6] = True
    assert dice(a, b) == 0.5
    assert dice(a, a) == 1.0
    assert dice(a, ~a) == 0.0
    assert dice(np.zeros(5, bool), np.zeros(5, bool)) == 1.0
    with pytest.raises(ShapeMismatch):
        dice(a, a[:5])


def test_psnr_examples():
    a = np.full(64, 0.3)
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert psnr(a, a + 1.0) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(EmptyMask):
        psnr(a, a, mask=np.zeros(64, bool))
    with pytest.raises(ValueError):
        psnr(a, a, data_max=0)


def test_psnr_mask_selects_voxels():
    a = np.zeros(8)
    b = np.zeros(8)
    b[0] = 5.0
    m = np.ones(8, bool)
    m[0] = False
    assert psnr(a, b, mask=m) == PSNR_CAP


def _naive_terms(a, b, window, sigma, c1, c2):
    """Direct windowed (SSIM, CS) means: explicit loops over every fully covered voxel."""
    r = np.arange(window) - (window - 1) / 2
    g = np.exp(-r ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    w = g[:, None, None] * g[None, :, None] * g[None, None, :]
    full, cs = [], []
    nz, ny, nx = a.shape
    for z in range(nz - window + 1):
        for y in range(ny - window + 1):
            for x in range(nx - window + 1):
                pa = a[z:z + window, y:y + window, x:x + window]
                pb = b[z:z + window, y:y + window, x:x + window]
                ma, mb = (w * pa).sum(), (w * pb).sum()
                va = (w * pa * pa).sum() - ma ** 2
                vb = (w * pb * pb).sum() - mb ** 2
                cov = (w * pa * pb).sum() - ma * mb
                s = (2 * cov + c2) / (va + vb + c2)
                cs.append(s)
                full.append(s * (2 * ma * mb + c1) / (ma ** 2 + mb ** 2 + c1))
    return float(np.mean(full)), float(np.mean(cs))


def _naive_ssim(a, b, window, sigma, c1, c2):
    return _naive_terms(a, b, window, sigma, c1, c2)[0]


def _naive_ms_ssim(a, b, levels=3):
    weights = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333][:levels])
    weights /= weights.sum()
    out = 1.0
    for lvl in range(levels):
        full, cs = _naive_terms(a, b, 7, 1.5, 0.01 ** 2, 0.03 ** 2)
        term = full if lvl == levels - 1 else cs
        out *= np.sign(term) * abs(term) ** weights[lvl]
        n = [d // 2 for d in a.shape]
        a = a[:2 * n[0], :2 * n[1], :2 * n[2]].reshape(n[0], 2, n[1], 2, n[2], 2).mean((1, 3, 5))
        b = b[:2 * n[0], :2 * n[1], :2 * n[2]].reshape(n[0], 2, n[1], 2, n[2], 2).mean((1, 3, 5))
    return float(out)


def test_ssim_matches_direct_formula():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((9, 10, 11)) * 0.2
    b = a + 0.1 * rng.standard_normal(a.shape)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    assert ssim_single_scale(a, b) == pytest.approx(_naive_ssim(a, b, 7, 1.5, c1, c2), rel=1e-10)
    neg = ssim_single_scale(a, -a)
    assert neg == pytest.approx(_naive_ssim(a, -a, 7, 1.5, c1, c2), rel=1e-10)


def test_ms_ssim_anticorrelated_matches_direct_formula():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((28, 28, 28))
    a -= a.mean()
    got = ms_ssim(a, -a)
    assert got == pytest.approx(_naive_ms_ssim(a, -a), rel=1e-9)
    assert got < 0


def test_ms_ssim_examples():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((28, 28, 28))
    a -= a.mean()
    assert ms_ssim(a, a) == 1.0
    assert ms_ssim(a, -a) < 0
    const = np.full((28, 28, 28), 0.4)
    assert ms_ssim(const, const) == 1.0
    b = a + 0.3 * rng.standard_normal(a.shape)
    assert ms_ssim(a, b) == pytest.approx(ms_ssim(b, a), abs=1e-12)
    with pytest.raises(GridTooSmall):
        ms_ssim(a[:16], a[:16])
    with pytest.raises(ValueError):
        ms_ssim(a, a, window=6)


@settings(max_examples=40, deadline=None)
@given(arrays(np.bool_, 30), arrays(np.bool_, 30))
def test_dice_symmetric_and_bounded(a, b):
    d = dice(a, b)
    assert d == dice(b, a)
    assert 0.0 <= d <= 1.0


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 20, elements=st.floats(-1, 1)),
       arrays(np.float64, 20, elements=st.floats(-1, 1)),
       st.sampled_from([-0.5, 0.25, 3.0]))
def test_psnr_shift_invariant(a, b, k):
    p0, p1 = psnr(a, b), psnr(a + k, b + k)
    if p0 == PSNR_CAP:
        assert p1 >= 90  # rounding of the shifted difference
    else:
        assert p1 == pytest.approx(p0, abs=1e-6)


class _E:
    def __init__(self, t, m, d, p):
        from tfk.conditioning import Modality
        self.t_days, self.modality = t, Modality.parse(m)
        self.dice_vs_conditioning, self.psnr_nontumor_vs_previous = d, p


class _B:
    def __init__(self, entries):
        self.entries = entries


def test_temporal_curves_order_and_errors():
    b = _B([_E(10.0, "T2", 0.8, 30.0), _E(0.0, "T2", 0.9, None), _E(10.0, "T1", 0.7, 31.0),
            _E(0.0, "T1", 0.95, None)])
    rows = temporal_curves(b)
    assert [(r["t_days"], r["modality"]) for r in rows] == [
        (0.0, "T1"), (0.0, "T2"), (10.0, "T1"), (10.0, "T2")]
    assert rows[0]["psnr"] is None and rows[3]["psnr"] == 30.0
    with pytest.raises(TooFewTimePoints):
        temporal_curves(_B([_E(0.0, "T1", 1.0, None)]))
    assert math.isclose(rows[2]["dice"], 0.7)
