"""Longitudinal generation by predecessor manipulation.

For each new time point the previous volume is carried back along the
learned flow to level ``tau_tilde`` (under the old conditioning), then
integrated forward to 1 under the conditioning built from the new
concentration field. With ``tau_tilde = 1`` both legs are empty and the
sequence is frozen; with ``tau_tilde = 0`` the previous volume is mapped all
the way back to its source sample and regenerated.

All modalities at a time point share one source sample, so their anatomy
stays aligned; they differ only in the modality embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ._parallel import pmap, resolve_threads
from .conditioning import SPATIAL_CHANNELS, Modality, assemble
from .errors import ModelConditioningMismatch, PlanInvalid
from .flowmatch import VelocityModel, integrate_forward, source_noise, transport_backward
from .grid import ScalarField3D, TissueMap
from .growth import (DEFAULT_POLICY, GrowthParams, ThresholdPolicy, concentration_to_mask,
                     max_stable_dt, simulate_at)
from .metrics import PSNR_CAP, dice, psnr

# segmenter(volume (C, nz, ny, nx), tissue, modality) -> flat bool whole-tumor mask
Segmenter = Callable[[np.ndarray, TissueMap, Modality], np.ndarray]

DEFAULT_SIM_DT = 0.5


@dataclass(frozen=True)
class LongitudinalPlan:
    time_points: tuple[float, ...]
    tau_tilde: float = 0.15
    integrator_steps: int = 50
    modalities: tuple[Modality, ...] = tuple(Modality)
    method: str = "euler"

    def __post_init__(self):
        tp = tuple(float(t) for t in self.time_points)
        object.__setattr__(self, "time_points", tp)
        object.__setattr__(self, "modalities", tuple(Modality.parse(m) for m in self.modalities))
        if not tp:
            raise PlanInvalid("plan needs at least one time point")
        if tp[0] != 0.0:
            raise PlanInvalid(f"first time point must be 0, got {tp[0]}")
        if any(b <= a for a, b in zip(tp, tp[1:])):
            raise PlanInvalid("time points must be strictly ascending")
        if not 0.0 <= self.tau_tilde <= 1.0:
            raise PlanInvalid(f"tau_tilde must lie in [0, 1], got {self.tau_tilde}")
        if int(self.integrator_steps) < 1:
            raise PlanInvalid("integrator_steps must be >= 1")
        if not self.modalities:
            raise PlanInvalid("plan needs at least one modality")
        if len(set(self.modalities)) != len(self.modalities):
            raise PlanInvalid("modalities must not repeat")
        if self.method not in ("euler", "heun"):
            raise PlanInvalid(f"unknown integrator {self.method!r}")

    def with_tau(self, tau_tilde: float) -> "LongitudinalPlan":
        return LongitudinalPlan(self.time_points, tau_tilde, self.integrator_steps,
                                self.modalities, self.method)

    def to_dict(self) -> dict:
        return {"time_points": list(self.time_points), "tau_tilde": self.tau_tilde,
                "integrator_steps": int(self.integrator_steps),
                "modalities": [m.name for m in self.modalities], "method": self.method}

    @classmethod
    def from_dict(cls, d: dict) -> "LongitudinalPlan":
        try:
            return cls(time_points=tuple(d["time_points"]),
                       tau_tilde=float(d.get("tau_tilde", 0.15)),
                       integrator_steps=int(d.get("integrator_steps", 50)),
                       modalities=tuple(d.get("modalities", [m.name for m in Modality])),
                       method=d.get("method", "euler"))
        except KeyError as exc:
            raise PlanInvalid(f"plan is missing {exc.args[0]!r}") from None
        except ValueError as exc:
            if isinstance(exc, PlanInvalid):
                raise
            raise PlanInvalid(str(exc)) from None


@dataclass
class TrajectoryEntry:
    t_days: float
    modality: Modality
    volume: np.ndarray  # (C, nz, ny, nx)
    mask: np.ndarray  # flat bool, read off the generated volume
    cond_mask: np.ndarray  # flat bool, thresholded conditioning
    dice_vs_conditioning: float
    psnr_nontumor_vs_previous: Optional[float] = None


@dataclass
class TrajectoryBundle:
    tissue: TissueMap
    plan: LongitudinalPlan
    concentrations: list[ScalarField3D]
    entries: list[TrajectoryEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, t_days: float, modality) -> TrajectoryEntry:
        m = Modality.parse(modality)
        for e in self.entries:
            if e.t_days == t_days and e.modality is m:
                return e
        raise KeyError((t_days, m.name))

    def follow_ups(self) -> list[TrajectoryEntry]:
        return [e for e in self.entries if e.psnr_nontumor_vs_previous is not None]


def default_segmenter(volume: np.ndarray, tissue: TissueMap, modality: Modality) -> np.ndarray:
    from .phantom import segment  # toy rule; phantom imports flowmatch, so import lazily
    return segment(volume[0], tissue, modality)


def nontumor_psnr(prev: np.ndarray, cur: np.ndarray, tissue: TissueMap,
                  prev_tumor: np.ndarray, cur_tumor: np.ndarray) -> float:
    """PSNR over brain voxels outside both tumor masks (every data channel)."""
    keep = tissue.brain_mask() & ~(prev_tumor | cur_tumor)
    if not keep.any():
        return PSNR_CAP if np.array_equal(prev, cur) else float("nan")
    c = prev.shape[0]
    sel = np.tile(keep, c)
    return psnr(prev.reshape(-1), cur.reshape(-1), mask=sel)


def _check_model(model: VelocityModel, plan: LongitudinalPlan, tissue: TissueMap,
                 initial_z) -> None:
    if model.cond_channels != SPATIAL_CHANNELS:
        raise ModelConditioningMismatch(
            f"model expects {model.cond_channels} conditioning channels, "
            f"conditioning provides {SPATIAL_CHANNELS}")
    top = max(int(m) for m in plan.modalities)
    if top >= model.n_modalities:
        raise ModelConditioningMismatch(
            f"model embeds {model.n_modalities} modalities, plan asks for code {top}")
    if initial_z is not None:
        for m in plan.modalities:
            if m not in initial_z:
                raise ModelConditioningMismatch(f"initial_z has no volume for {m.name}")
            want = (model.data_channels,) + tissue.spec.shape
            if np.shape(initial_z[m]) != want:
                raise ModelConditioningMismatch(
                    f"initial volume for {m.name} has shape {np.shape(initial_z[m])}, "
                    f"expected {want}")


def _conc_fields(tissue, growth_params, plan, dt) -> list[ScalarField3D]:
    if dt is None:
        dt = min(DEFAULT_SIM_DT, max_stable_dt(tissue.spec, growth_params.d_max))
    return [f for _, f in simulate_at(tissue, growth_params, plan.time_points, dt)]


def run_trajectory(model: VelocityModel, tissue: TissueMap,
                   concentrations: Sequence[ScalarField3D], plan: LongitudinalPlan,
                   initial_z: Optional[dict] = None, rng_seed: int = 0,
                   segmenter: Optional[Segmenter] = None,
                   policy: ThresholdPolicy = DEFAULT_POLICY,
                   threads: Optional[int] = None) -> TrajectoryBundle:
    """Generate a trajectory from precomputed concentration fields (one per time point)."""
    if len(concentrations) != len(plan.time_points):
        raise PlanInvalid(f"{len(concentrations)} concentration fields for "
                          f"{len(plan.time_points)} time points")
    _check_model(model, plan, tissue, initial_z)
    seg = segmenter or default_segmenter
    steps, tt = int(plan.integrator_steps), float(plan.tau_tilde)
    spec = tissue.spec
    z0 = source_noise(rng_seed, 0, (model.data_channels,) + spec.shape, model.dtype)
    init = None
    if initial_z is not None:
        init = {Modality.parse(k): np.asarray(v, dtype=model.dtype) for k, v in initial_z.items()}
    cond_masks = [concentration_to_mask(c, policy).whole_tumor() for c in concentrations]
    bundle = TrajectoryBundle(tissue, plan, list(concentrations))
    prev: dict[Modality, np.ndarray] = {}
    workers = resolve_threads(threads)

    for i, t in enumerate(plan.time_points):
        def one(m: Modality):
            cond = assemble(tissue, concentrations[i], m)
            if i == 0:
                if init is not None:
                    return init[m].copy()
                return integrate_forward(model, z0, 0.0, 1.0, steps, cond, plan.method)
            before = assemble(tissue, concentrations[i - 1], m)
            zt = transport_backward(model, prev[m], tt, steps, before, plan.method)
            return integrate_forward(model, zt, tt, 1.0, steps, cond, plan.method)

        vols = pmap(one, plan.modalities, workers)
        for m, vol in zip(plan.modalities, vols):
            mask = np.asarray(seg(vol, tissue, m), dtype=bool).reshape(-1)
            entry = TrajectoryEntry(t, m, vol, mask, cond_masks[i], dice(mask, cond_masks[i]))
            if i > 0:
                entry.psnr_nontumor_vs_previous = nontumor_psnr(
                    prev[m], vol, tissue, cond_masks[i - 1], cond_masks[i])
            bundle.entries.append(entry)
            prev[m] = vol
    return bundle


def generate_trajectory(model: VelocityModel, tissue: TissueMap, growth_params: GrowthParams,
                        plan: LongitudinalPlan, initial_z: Optional[dict] = None,
                        rng_seed: int = 0, dt: Optional[float] = None,
                        segmenter: Optional[Segmenter] = None,
                        policy: ThresholdPolicy = DEFAULT_POLICY,
                        threads: Optional[int] = None) -> TrajectoryBundle:
    """Simulate growth at the plan's time points and synthesize every modality.

    ``initial_z`` optionally maps modality to a (C, nz, ny, nx) volume used
    as-is at t = 0 instead of sampling from noise.
    """
    concs = _conc_fields(tissue, growth_params, plan, dt)
    return run_trajectory(model, tissue, concs, plan, initial_z, rng_seed, segmenter,
                          policy, threads)


@dataclass(frozen=True)
class SweepRow:
    tau: float
    mean_dice: float
    mean_psnr: float

    def row(self) -> list:
        return [repr(self.tau), repr(self.mean_dice), repr(self.mean_psnr)]


def summarize(bundle: TrajectoryBundle) -> tuple[float, float]:
    """(mean Dice over all entries, mean nontumor PSNR over follow-ups)."""
    dices = [e.dice_vs_conditioning for e in bundle.entries]
    ps = [e.psnr_nontumor_vs_previous for e in bundle.follow_ups()]
    return float(np.mean(dices)), (float(np.mean(ps)) if ps else float("nan"))


def corruption_sweep(model: VelocityModel, tissue: TissueMap, growth_params: GrowthParams,
                     plan: LongitudinalPlan, tau_values: Sequence[float], rng_seed: int = 0,
                     dt: Optional[float] = None, segmenter: Optional[Segmenter] = None,
                     policy: ThresholdPolicy = DEFAULT_POLICY,
                     threads: Optional[int] = None) -> list[SweepRow]:
    """One trajectory per corruption level; rows keep the order of ``tau_values``."""
    taus = [float(t) for t in tau_values]
    for t in taus:
        if not 0.0 <= t <= 1.0:
            raise PlanInvalid(f"tau values must lie in [0, 1], got {t}")
    concs = _conc_fields(tissue, growth_params, plan, dt)

    def one(tau):
        b = run_trajectory(model, tissue, concs, plan.with_tau(tau), None, rng_seed,
                           segmenter, policy, threads=1)
        return SweepRow(tau, *summarize(b))

    return pmap(one, taus, resolve_threads(threads))
