"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The trained toy model (A5) is built once per module and reused by A6 to A8.
Run alone with ``pytest tests/test_acceptance.py -v``; the verdict lines are
repeated in the terminal summary.
"""

import math
import subprocess
import sys
import time

import numpy as np
import pytest

from acceptance_log import verdict
from helpers import logistic, measure_front_speed
from tfk.conditioning import Modality, assemble
from tfk.flowmatch import (FlowSample, TrainConfig, VelocityModel, fm_loss, integrate_forward,
                           source_noise, train, transport_backward)
from tfk.grid import GridSpec, ScalarField3D, Tissue, TissueMap, pairwise_sum
from tfk.growth import (GrowthParams, SearchGrid, SimClock, concentration_to_mask,
                        diffusion_map, fisher_kpp_speed, fit_growth_params, fk_step,
                        max_stable_dt, simulate)
from tfk.longitudinal import LongitudinalPlan, corruption_sweep, generate_trajectory
from tfk.metrics import PSNR_CAP, dice, ms_ssim, psnr
from tfk.phantom import make_phantom, segment, to_training_pairs, toy_dataset

# toy training recipe shared by A5 to A8
TOY_GRID = 16
TOY_TRAIN, TOY_HELD = 500, 50
TOY_STEPS = 2000
TOY_CFG = dict(hidden=16, batch=4, learning_rate=3e-3, ema_decay=0.99, seed=0)
GEN_STEPS = 50
SWEEP_TAUS = (0.05, 0.15, 0.5, 0.9)


def _monotone(values, direction, slack=0.02):
    """At most one adjacent pair against ``direction`` (+1 up, -1 down), within slack."""
    bad = []
    for a, b in zip(values, values[1:]):
        step = (b - a) * direction
        if step < 0:
            bad.append(abs(b - a) <= slack * abs(a))
    return len(bad) <= 1 and all(bad)


# -- growth ---------------------------------------------------------------------------

def test_a1_logistic_oracle():
    spec = GridSpec.cube(32)
    tissue = TissueMap.uniform(spec, Tissue.WHITE_MATTER)
    dmap = ScalarField3D(spec, np.zeros(spec.size))
    c = ScalarField3D(spec, np.full(spec.size, 0.1))
    rho, dt = 0.03, 0.1
    start = time.perf_counter()
    worst = 0.0
    for k in range(1, 1001):
        c = fk_step(c, dmap, tissue, rho, dt)
        worst = max(worst, float(np.max(np.abs(c.values - logistic(0.1, rho, k * dt)))))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and elapsed < 5.0
    verdict("A1", ok, f"max |C - logistic| = {worst:.2e} over 100 days (<= 1e-4), "
                      f"{elapsed:.2f} s on 32^3 (< 5 s)")
    assert ok


def test_a2_mass_conservation():
    tissue = make_phantom(GridSpec.cube(16))
    rng = np.random.default_rng(2)
    inside = tissue.parenchyma_mask()
    c = ScalarField3D(tissue.spec, np.where(inside, rng.random(tissue.spec.size), 0.0))
    dmap = diffusion_map(tissue, GrowthParams(seed_center=(8, 8, 8), d_white=0.28))
    dt = max_stable_dt(tissue.spec, 0.28)
    prev = pairwise_sum(c.values)
    worst = 0.0
    for _ in range(1000):
        c = fk_step(c, dmap, tissue, rho=0.0, dt=dt)
        cur = pairwise_sum(c.values)
        worst = max(worst, abs(cur - prev) / prev)
        prev = cur
    ok = worst <= 1e-10
    verdict("A2", ok, f"max relative drift per step {worst:.2e} over 1000 steps (<= 1e-10)")
    assert ok


def test_a3_front_speed():
    start = time.perf_counter()
    speed = measure_front_speed(0.03, 0.28, n=256)
    elapsed = time.perf_counter() - start
    want = fisher_kpp_speed(0.03, 0.28)
    rel = abs(speed - want) / want
    ok = rel <= 0.10 and elapsed < 30.0
    verdict("A3", ok, f"front speed {speed:.4f} vs {want:.4f} mm/day "
                      f"({100 * rel:.1f}% off, <= 10%), {elapsed:.1f} s (< 30 s)")
    assert ok


# -- flow matching --------------------------------------------------------------------

def test_a4_gradient_check():
    spec = GridSpec.cube(5)
    rng = np.random.default_rng(4)
    tissue = TissueMap(spec, rng.integers(0, 4, spec.size))
    model = VelocityModel(hidden=4, rng_seed=4)
    p = model.psi.copy()
    # the final layer starts at zero; perturb it so every layer carries gradient
    for name in ("w3", "b3", "b1", "b2"):
        view = model.views(p)[name]
        view[...] = 0.3 * rng.standard_normal(view.shape)
    model = model.with_params(p)
    batch = []
    for i, tau in enumerate((0.1, 0.45, 0.9)):
        conc = ScalarField3D(spec, np.where(tissue.parenchyma_mask(), rng.random(spec.size), 0))
        batch.append(FlowSample(rng.standard_normal((1,) + spec.shape),
                                rng.random((1,) + spec.shape), tau,
                                assemble(tissue, conc, Modality(i))))
    _, grad = fm_loss(model, batch)
    eps = 1e-4
    coords = rng.choice(model.n_params, 120, replace=False)
    worst = 0.0
    for i in coords:
        hi, lo = p.copy(), p.copy()
        hi[i] += eps
        lo[i] -= eps
        fd = (fm_loss(model.with_params(hi), batch)[0]
              - fm_loss(model.with_params(lo), batch)[0]) / (2 * eps)
        # floor keeps exact zeros (dead ReLU paths) from dividing by zero
        worst = max(worst, abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-8))
    ok = worst <= 1e-5
    verdict("A4", ok, f"max relative FD error {worst:.2e} on {len(coords)} coordinates "
                      f"of a 5^3 H=4 model (<= 1e-5)")
    assert ok


@pytest.fixture(scope="module")
def toy():
    spec = GridSpec.cube(TOY_GRID)
    start = time.perf_counter()
    cases = toy_dataset(spec, TOY_TRAIN + TOY_HELD, seed=TOY_CFG["seed"])
    pairs = to_training_pairs(cases[:TOY_TRAIN])
    model = VelocityModel(hidden=TOY_CFG["hidden"], rng_seed=TOY_CFG["seed"], dtype=np.float32)
    cfg = TrainConfig(steps=TOY_STEPS, batch=TOY_CFG["batch"],
                      learning_rate=TOY_CFG["learning_rate"], ema_decay=TOY_CFG["ema_decay"],
                      rng_seed=TOY_CFG["seed"])
    res = train(model, pairs, cfg)
    held = cases[TOY_TRAIN:]
    conds = [assemble(c.tissue, c.conc, c.modality) for c in held]
    z0 = np.stack([source_noise(99, i, (1,) + spec.shape, np.float32) for i in range(TOY_HELD)])
    gen = integrate_forward(res.ema, z0, 0.0, 1.0, GEN_STEPS, conds)
    elapsed = time.perf_counter() - start
    return dict(spec=spec, pairs=pairs, held=held, result=res, generated=gen,
                conds=conds, seconds=elapsed)


def test_a5_toy_conditioning_adherence(toy):
    held, gen = toy["held"], toy["generated"]
    scores = [dice(segment(gen[i, 0], c.tissue, c.modality),
                   concentration_to_mask(c.conc).whole_tumor()) for i, c in enumerate(held)]
    mean = float(np.mean(scores))
    ok = mean >= 0.8 and toy["seconds"] < 600
    verdict("A5", ok, f"mean whole-tumor Dice {mean:.3f} on {len(held)} held-out fields "
                      f"(>= 0.8; min {min(scores):.3f}), train + generate "
                      f"{toy['seconds']:.0f} s (< 600 s)")
    assert ok


def test_toy_training_loss_drops(toy):
    losses = toy["result"].losses
    initial, final = float(np.mean(losses[:20])), float(np.mean(losses[-100:]))
    # brute-force reference: best constant velocity is the mean of z1 - z0,
    # whose loss is the variance; z0 is unit normal so that is 1 + Var(z1)
    x1 = np.stack([p.x1 for p in toy["pairs"]])
    const_loss = 1.0 + float(np.var(x1))
    ok = final < 0.25 * initial
    verdict("train-loss", ok, f"final {final:.4f} vs initial {initial:.4f} "
                              f"(< 0.25x); best constant predictor {const_loss:.4f}")
    assert ok


def _toy_longitudinal(spec):
    tissue = make_phantom(spec)
    center = np.argwhere(tissue.array == Tissue.WHITE_MATTER).mean(axis=0)[::-1]
    growth = GrowthParams(seed_center=tuple(float(round(v)) for v in center))
    plan = LongitudinalPlan((0, 15, 30, 45, 60), 0.15, GEN_STEPS, tuple(Modality))
    return tissue, growth, plan


def test_a6_tau_one_identity(toy):
    tissue, growth, plan = _toy_longitudinal(toy["spec"])
    b = generate_trajectory(toy["result"].ema, tissue, growth, plan.with_tau(1.0), rng_seed=1)
    same = []
    for m in plan.modalities:
        vols = [b.get(t, m).volume for t in plan.time_points]
        same += [np.array_equal(a, c) for a, c in zip(vols, vols[1:])]
    ok = all(same)
    verdict("A6", ok, f"{sum(same)}/{len(same)} follow-ups bitwise equal to predecessors")
    assert ok


def test_a7_corruption_sweep_trend(toy):
    tissue, growth, plan = _toy_longitudinal(toy["spec"])
    rows = corruption_sweep(toy["result"].ema, tissue, growth, plan, SWEEP_TAUS, rng_seed=1)
    ps = [r.mean_psnr for r in rows]
    ds = [r.mean_dice for r in rows]
    psnr_ok = _monotone(ps, -1)
    dice_ok = _monotone(ds, +1)
    table = ", ".join(f"{r.tau:g}: PSNR {r.mean_psnr:.2f} Dice {r.mean_dice:.3f}" for r in rows)
    ok = psnr_ok and dice_ok
    verdict("A7", ok, f"PSNR non-increasing {psnr_ok}, Dice non-decreasing {dice_ok} "
                      f"[{table}]")
    assert ok


def test_a8_round_trip_convergence(toy):
    model = toy["result"].ema
    z1 = toy["generated"][:4]
    cond = toy["conds"][:4]
    errs = []
    for steps in (25, 50, 100):
        back = transport_backward(model, z1, 0.15, steps, cond, "heun")
        fwd = integrate_forward(model, back, 0.15, 1.0, steps, cond, "heun")
        errs.append(float(np.linalg.norm(fwd - z1) / np.linalg.norm(z1)))
    ok = errs[0] > errs[1] > errs[2]
    verdict("A8", ok, "relative round-trip error (Heun, tau 0.15) "
                      + ", ".join(f"{s} steps {e:.2e}" for s, e in zip((25, 50, 100), errs)))
    assert ok


# -- calibration ----------------------------------------------------------------------

def test_a9_fit_recovery():
    tissue = make_phantom(GridSpec.cube(16))
    clock = SimClock(dt=0.5, t_end=20.0)
    truth = GrowthParams(seed_center=(8, 8, 8), rho=0.05, d_white=0.2)
    target = concentration_to_mask(simulate(tissue, truth, clock)[-1][1])
    on_grid = SearchGrid(rho=[0.03, 0.05], d_white=[0.2, 0.3],
                         seed_centers=[(8, 8, 8), (7, 8, 8)])
    a = fit_growth_params(target, tissue, on_grid, clock, template=truth)
    # truth sits half a grid cell away from the nearest rho grid point
    off_grid = SearchGrid(rho=[0.03, 0.07], d_white=[0.2, 0.3],
                          seed_centers=[(8, 8, 8), (7, 8, 8)])
    b = fit_growth_params(target, tissue, off_grid, clock, template=truth)
    recovered = (a.params.rho, a.params.d_white, a.params.seed_center) == (
        truth.rho, truth.d_white, truth.seed_center)
    ok = a.fit_dice == 1.0 and recovered and b.fit_dice > b.grid_dice
    verdict("A9", ok, f"on-grid fit_dice {a.fit_dice:.3f} recovered={recovered}; off-grid "
                      f"grid {b.grid_dice:.3f} -> descent {b.fit_dice:.3f}")
    assert ok


# -- CLI ------------------------------------------------------------------------------

def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_a10_demo_determinism(tmp_path):
    trees = []
    for name, threads in (("a", "1"), ("b", "1"), ("c", "8")):
        work = tmp_path / name
        work.mkdir()
        r = subprocess.run([sys.executable, "-m", "tfk", "demo", "--seed", "7", "--threads",
                            threads, "--out", "out"], cwd=work, capture_output=True, text=True)
        assert r.returncode == 0, r.stderr
        trees.append(_tree(work / "out"))
    repeat, threads = trees[0] == trees[1], trees[0] == trees[2]
    ok = repeat and threads and len(trees[0]) > 0
    verdict("A10", ok, f"{len(trees[0])} files; repeat identical {repeat}, "
                       f"--threads 1 vs 8 identical {threads}")
    assert ok


# -- metrics --------------------------------------------------------------------------

def test_a11_metric_unit_oracles():
    a = np.zeros(8, bool)
    b = np.zeros(8, bool)
    a[:4] = True
    b[2:6] = True
    img = np.random.default_rng(11).random((32, 32, 32))
    checks = {
        "dice identical": dice(a, a) == 1.0,
        "dice disjoint": dice(a, ~a) == 0.0,
        "dice 0.5": dice(a, b) == 0.5,
        "psnr cap": psnr(img, img) == PSNR_CAP,
        "psnr 20 dB": math.isclose(psnr(np.zeros(8), np.full(8, 0.1)), 20.0, abs_tol=1e-12),
        "psnr 0 dB": psnr(np.zeros(8), np.ones(8)) == 0.0,
        "ms-ssim self": ms_ssim(img, img) == 1.0,
        "ms-ssim constants": ms_ssim(np.full((32, 32, 32), 0.3),
                                     np.full((32, 32, 32), 0.3)) == 1.0,
    }
    failed = [k for k, v in checks.items() if not v]
    ok = not failed
    verdict("A11", ok, f"{len(checks) - len(failed)}/{len(checks)} metric examples exact"
                       + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert ok
