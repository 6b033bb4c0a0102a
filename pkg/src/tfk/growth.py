"""Fisher-Kolmogorov tumor growth on a tissue map.

Solves dC/dt = div(D grad C) + rho C (1 - C) with an explicit 7-point
finite-volume diffusion step (harmonic-mean face diffusivities, zero flux
wherever a face touches CSF, background or the grid edge) followed by the
exact logistic update of the reaction term over the same step.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import metrics
from ._parallel import pmap
from .errors import (EmptySearchGrid, EmptyTarget, InvalidParams, SeedOutsideBrain,
                     ShapeMismatch, UnstableTimestep, ConcentrationOutOfRange)
from .grid import GridSpec, Label, LabelMask, ScalarField3D, Tissue, TissueMap

STABILITY_SAFETY = 0.9
# slack for dt values computed right at the bound
_BOUND_RTOL = 1e-12


@dataclass(frozen=True)
class GrowthParams:
    seed_center: tuple[float, float, float]
    rho: float = 0.03
    d_white: float = 0.28
    gray_ratio: float = 0.1
    seed_sigma: float = 2.0
    seed_amplitude: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "seed_center", tuple(float(v) for v in self.seed_center))
        if len(self.seed_center) != 3:
            raise InvalidParams("seed_center needs three coordinates")
        if not self.rho > 0:
            raise InvalidParams(f"rho must be positive, got {self.rho}")
        if not self.d_white > 0:
            raise InvalidParams(f"d_white must be positive, got {self.d_white}")
        if not 0 < self.gray_ratio <= 1:
            raise InvalidParams(f"gray_ratio must lie in (0, 1], got {self.gray_ratio}")
        if not 0 < self.seed_amplitude <= 1:
            raise InvalidParams(f"seed_amplitude must lie in (0, 1], got {self.seed_amplitude}")
        if not self.seed_sigma > 0:
            raise InvalidParams(f"seed_sigma must be positive, got {self.seed_sigma}")

    @property
    def d_max(self) -> float:
        return self.d_white

    def to_dict(self) -> dict:
        return {"rho": self.rho, "d_white": self.d_white, "gray_ratio": self.gray_ratio,
                "seed_center": list(self.seed_center), "seed_sigma": self.seed_sigma,
                "seed_amplitude": self.seed_amplitude}

    @classmethod
    def from_dict(cls, d: dict) -> "GrowthParams":
        keys = ("rho", "d_white", "gray_ratio", "seed_sigma", "seed_amplitude")
        return cls(seed_center=tuple(d["seed_center"]), **{k: d[k] for k in keys if k in d})


def max_stable_dt(spec: GridSpec, d_max: float, safety: float = STABILITY_SAFETY) -> float:
    if d_max <= 0:
        return math.inf
    return safety * spec.min_spacing ** 2 / (6.0 * d_max)


def check_stable(spec: GridSpec, d_max: float, dt: float) -> None:
    if not dt > 0:
        raise UnstableTimestep(f"dt must be positive, got {dt}")
    bound = max_stable_dt(spec, d_max)
    if dt > bound * (1 + _BOUND_RTOL):
        raise UnstableTimestep(
            f"dt={dt} exceeds the explicit stability bound {bound:.6g} "
            f"(min spacing {spec.min_spacing}, D_max {d_max})")


@dataclass(frozen=True)
class SimClock:
    dt: float
    t_end: float
    snapshot_every: float | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise UnstableTimestep(f"dt must be positive, got {self.dt}")
        if self.t_end < 0:
            raise InvalidParams(f"t_end must be non-negative, got {self.t_end}")
        if self.snapshot_every is not None and not self.snapshot_every > 0:
            raise InvalidParams("snapshot_every must be positive")

    def snapshot_times(self) -> list[float]:
        every = self.snapshot_every or self.t_end or 1.0
        n = int(math.floor(self.t_end / every + 1e-9))
        times = [k * every for k in range(n + 1)]
        if self.t_end - times[-1] > 1e-9 * max(1.0, self.t_end):
            times.append(self.t_end)
        return times


@dataclass(frozen=True)
class ThresholdPolicy:
    background_below: float = 0.2
    enhancing_at_or_above: float = 0.6

    def __post_init__(self):
        lo, hi = self.background_below, self.enhancing_at_or_above
        if not 0 < lo < hi <= 1:
            raise InvalidParams(f"need 0 < {lo} < {hi} <= 1")

    @property
    def edema_range(self) -> tuple[float, float]:
        """Half-open interval [low, high) labelled as edema."""
        return (self.background_below, self.enhancing_at_or_above)


DEFAULT_POLICY = ThresholdPolicy()


def diffusion_map(tissue: TissueMap, params: GrowthParams) -> ScalarField3D:
    lab = tissue.labels
    d = np.zeros(lab.shape)
    d[lab == Tissue.WHITE_MATTER] = params.d_white
    d[lab == Tissue.GRAY_MATTER] = params.gray_ratio * params.d_white
    return ScalarField3D(tissue.spec, d)


def seed_initial(tissue: TissueMap, params: GrowthParams) -> ScalarField3D:
    spec = tissue.spec
    center = params.seed_center
    if not spec.contains(center):
        raise SeedOutsideBrain(f"seed {center} lies outside the grid")
    cx, cy, cz = (int(round(v)) for v in center)
    if tissue.labels[spec.index(cx, cy, cz)] < Tissue.GRAY_MATTER:
        raise SeedOutsideBrain(f"seed {center} is not in gray or white matter")
    z, y, x = np.meshgrid(np.arange(spec.nz), np.arange(spec.ny), np.arange(spec.nx),
                          indexing="ij")
    r2 = (((x - center[0]) * spec.dx) ** 2 + ((y - center[1]) * spec.dy) ** 2
          + ((z - center[2]) * spec.dz) ** 2)
    c = params.seed_amplitude * np.exp(-r2 / (2.0 * params.seed_sigma ** 2))
    c = np.where(tissue.parenchyma_mask().reshape(spec.shape), c, 0.0)
    return ScalarField3D.from_array(spec, np.clip(c, 0.0, 1.0))


class _Stencil:
    """Face conductances D_face / h^2 for the three axes of a (nz, ny, nx) grid."""

    def __init__(self, dmap: ScalarField3D, tissue: TissueMap):
        spec = dmap.spec
        d = np.where(tissue.parenchyma_mask(), dmap.values, 0.0).reshape(spec.shape)
        self.d_max = float(d.max()) if d.size else 0.0
        self.spec = spec
        self.inside = tissue.parenchyma_mask().reshape(spec.shape)
        self.faces = []
        for axis, h in ((0, spec.dz), (1, spec.dy), (2, spec.dx)):
            if d.shape[axis] < 2:
                self.faces.append(None)
                continue
            lo = _axis_slice(axis, 0, -1)
            hi = _axis_slice(axis, 1, None)
            a, b = d[lo], d[hi]
            s = a + b
            hm = np.divide(2.0 * a * b, s, out=np.zeros_like(s), where=s > 0)
            self.faces.append(hm / h ** 2)

    def divergence(self, c: np.ndarray) -> np.ndarray:
        out = np.zeros_like(c)
        for axis, k in enumerate(self.faces):
            if k is None:
                continue
            lo = _axis_slice(axis, 0, -1)
            hi = _axis_slice(axis, 1, None)
            flux = k * (c[hi] - c[lo])
            out[lo] += flux
            out[hi] -= flux
        return out


def _axis_slice(axis: int, start, stop) -> tuple:
    sl = [slice(None)] * 3
    sl[axis] = slice(start, stop)
    return tuple(sl)


def _logistic(c: np.ndarray, rho: float, dt: float) -> np.ndarray:
    g = math.exp(rho * dt)
    return c * g / (1.0 + c * (g - 1.0))


def _advance(c: np.ndarray, stencil: _Stencil, rho: float, dt: float,
             reaction: str = "exact") -> np.ndarray:
    if stencil.d_max > 0:
        c = c + dt * stencil.divergence(c)
    if rho != 0:
        if reaction == "exact":
            c = _logistic(c, rho, dt)
        elif reaction == "euler":
            c = c + dt * rho * c * (1.0 - c)
        else:
            raise ValueError(f"unknown reaction scheme {reaction!r}")
    c = np.clip(c, 0.0, 1.0)
    c[~stencil.inside] = 0.0
    return c


def _check_conc(c: ScalarField3D) -> None:
    v = c.values
    if v.size and (v.min() < 0 or v.max() > 1):
        raise ConcentrationOutOfRange("concentration must lie in [0, 1]")


def fk_step(c: ScalarField3D, dmap: ScalarField3D, tissue: TissueMap, rho: float,
            dt: float, reaction: str = "exact") -> ScalarField3D:
    """Advance the concentration by one time step ``dt`` (days).

    ``reaction="exact"`` integrates the logistic term in closed form over the
    step; ``"euler"`` uses the plain explicit update ``dt * rho * C (1 - C)``.
    """
    if not (c.spec == dmap.spec == tissue.spec):
        raise ShapeMismatch("concentration, diffusion map and tissue must share a GridSpec")
    _check_conc(c)
    stencil = _Stencil(dmap, tissue)
    check_stable(c.spec, stencil.d_max, dt)
    out = _advance(c.array.copy(), stencil, rho, dt, reaction)
    return ScalarField3D.from_array(c.spec, out)


def simulate_at(tissue: TissueMap, params: GrowthParams, times: Sequence[float],
                dt: float, reaction: str = "exact") -> list[tuple[float, ScalarField3D]]:
    """Snapshots of the growth trajectory at the given ascending times (days).

    Each interval between snapshots is split into the fewest equal steps no
    longer than ``dt``; snapshot times are therefore hit exactly.
    """
    times = [float(t) for t in times]
    if not times or times[0] < 0 or any(b < a for a, b in zip(times, times[1:])):
        raise InvalidParams("snapshot times must be non-negative and ascending")
    stencil = _Stencil(diffusion_map(tissue, params), tissue)
    check_stable(tissue.spec, stencil.d_max, dt)
    c = seed_initial(tissue, params).array.copy()
    out = []
    t_prev = 0.0
    for t in times:
        interval = t - t_prev
        if interval > 0:
            n = max(1, math.ceil(interval / dt - 1e-9))
            h = interval / n
            for _ in range(n):
                c = _advance(c, stencil, params.rho, h, reaction)
        out.append((t, ScalarField3D.from_array(tissue.spec, c)))
        t_prev = t
    return out


def simulate(tissue: TissueMap, params: GrowthParams, clock: SimClock,
             reaction: str = "exact") -> list[tuple[float, ScalarField3D]]:
    return simulate_at(tissue, params, clock.snapshot_times(), clock.dt, reaction)


def concentration_to_mask(c: ScalarField3D, policy: ThresholdPolicy = DEFAULT_POLICY) -> LabelMask:
    v = c.values
    labels = np.full(v.shape, Label.BACKGROUND, dtype=np.uint8)
    labels[v >= policy.background_below] = Label.EDEMA
    labels[v >= policy.enhancing_at_or_above] = Label.ENHANCING
    return LabelMask(c.spec, labels)


# -- calibration ------------------------------------------------------------

@dataclass(frozen=True)
class SearchGrid:
    """Candidate values for the calibrated parameters.

    Unlisted parameters (gray ratio, seed width and amplitude) come from the
    ``template`` passed to :func:`fit_growth_params`.
    """
    rho: Sequence[float]
    d_white: Sequence[float]
    seed_centers: Sequence[tuple[float, float, float]]

    def points(self) -> list[tuple[float, float, tuple[float, float, float]]]:
        rhos = sorted(float(r) for r in self.rho)
        ds = sorted(float(d) for d in self.d_white)
        seeds = sorted(tuple(float(v) for v in s) for s in self.seed_centers)
        return list(itertools.product(rhos, ds, seeds))

    @classmethod
    def from_dict(cls, d: dict) -> "SearchGrid":
        return cls(rho=d["rho"], d_white=d["d_white"],
                   seed_centers=[tuple(s) for s in d["seed_centers"]])


@dataclass
class FitResult:
    params: GrowthParams
    fit_dice: float
    grid_dice: float
    evaluations: int = 0
    history: list = field(default_factory=list)

    def __iter__(self):
        # unpacks as (params, fit_dice)
        return iter((self.params, self.fit_dice))


def _spacing(values: Sequence[float], fallback: float) -> float:
    u = sorted(set(values))
    if len(u) < 2:
        return fallback
    return min(b - a for a, b in zip(u, u[1:]))


def fit_growth_params(target: LabelMask, tissue: TissueMap, search: SearchGrid,
                      clock: SimClock, template: GrowthParams | None = None,
                      policy: ThresholdPolicy = DEFAULT_POLICY, halvings: int = 3,
                      threads: int | None = None) -> FitResult:
    """Grid search over (rho, d_white, seed center) then one coordinate-descent pass.

    The objective is whole-tumor Dice between the thresholded final snapshot
    and ``target``. Grid ties go to the lexicographically smallest point.
    Descent visits rho, d_white, seed x, y, z in that order and tries
    +/- step/2, step/4, step/8 (``halvings`` levels) where step is the grid
    spacing along that coordinate; a move is kept only on strict improvement.
    """
    if target.spec != tissue.spec:
        raise ShapeMismatch("target and tissue must share a GridSpec")
    want = target.whole_tumor()
    if not want.any():
        raise EmptyTarget("target mask has no tumor voxels")
    points = search.points()
    if not points:
        raise EmptySearchGrid("search grid is empty")
    if template is None:
        template = GrowthParams(seed_center=points[0][2])

    def score(p: GrowthParams) -> float:
        last = simulate(tissue, p, clock)[-1][1]
        return metrics.dice(concentration_to_mask(last, policy).whole_tumor(), want)

    def make(rho, d, seed) -> GrowthParams | None:
        try:
            p = replace(template, rho=rho, d_white=d, seed_center=seed)
            seed_initial(tissue, p)
            check_stable(tissue.spec, p.d_max, clock.dt)
        except (InvalidParams, SeedOutsideBrain, UnstableTimestep):
            return None
        return p

    cands = [make(*pt) for pt in points]
    scores = pmap(lambda p: -1.0 if p is None else score(p), cands, threads)
    best_i = int(np.argmax(scores))  # first maximum == lexicographic tie-break
    if cands[best_i] is None:
        raise EmptySearchGrid("no grid point yields valid, stable parameters")
    best, best_score = cands[best_i], scores[best_i]
    grid_score = best_score
    evaluations = len(points)
    history = [("grid", best.to_dict(), best_score)]

    seeds = [pt[2] for pt in points]
    steps = [
        _spacing([pt[0] for pt in points], 0.1 * best.rho),
        _spacing([pt[1] for pt in points], 0.1 * best.d_white),
        _spacing([s[0] for s in seeds], 1.0),
        _spacing([s[1] for s in seeds], 1.0),
        _spacing([s[2] for s in seeds], 1.0),
    ]
    for coord, base_step in enumerate(steps):
        for level in range(1, halvings + 1):
            if best_score >= 1.0:
                break
            h = base_step / 2 ** level
            trial = []
            for sign in (-1.0, 1.0):
                vec = [best.rho, best.d_white, *best.seed_center]
                vec[coord] += sign * h
                trial.append(make(vec[0], vec[1], tuple(vec[2:])))
            trial_scores = pmap(lambda p: -1.0 if p is None else score(p), trial, threads)
            evaluations += sum(p is not None for p in trial)
            k = int(np.argmax(trial_scores))
            if trial[k] is not None and trial_scores[k] > best_score:
                best, best_score = trial[k], trial_scores[k]
                history.append(("descent", best.to_dict(), best_score))
    return FitResult(best, best_score, grid_score, evaluations, history)


def fisher_kpp_speed(rho: float, d: float) -> float:
    """Asymptotic traveling-wave speed 2 sqrt(rho D) of a pulled front."""
    return 2.0 * math.sqrt(rho * d)


def front_position(c: ScalarField3D, level: float = 0.5, axis: int = 0) -> float:
    """Distance (mm) of the ``level`` crossing along a 1D-like line from voxel 0.

    Linear interpolation between the last voxel above and first voxel below
    ``level``; the profile is taken along the given axis (0 = x) through the
    first row.
    """
    arr = c.array
    spec = c.spec
    if axis == 0:
        prof, h = arr[0, 0, :], spec.dx
    elif axis == 1:
        prof, h = arr[0, :, 0], spec.dy
    else:
        prof, h = arr[:, 0, 0], spec.dz
    above = np.nonzero(prof >= level)[0]
    if above.size == 0:
        return 0.0
    i = int(above[-1])
    if i + 1 >= prof.size:
        return i * h
    a, b = prof[i], prof[i + 1]
    frac = (a - level) / (a - b) if a != b else 0.0
    return (i + frac) * h
