"""Command-line entry point: ``tfk <command> [flags]``.

Every command writes its outputs plus a ``manifest.json`` describing the
run (argv, resolved config, seeds, input and output digests). The manifest
is written last and atomically, so its presence marks a complete run.
``tfk replay --manifest m.json --out dir`` re-executes a recorded run.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._parallel import resolve_threads
from .conditioning import Modality, assemble
from .errors import TfkError
from .grid import GridSpec, LabelMask, ScalarField3D, TissueMap
from .growth import (DEFAULT_POLICY, GrowthParams, SearchGrid, SimClock, concentration_to_mask,
                     fit_growth_params, max_stable_dt, simulate, simulate_at)
from .io import (read_json, read_volume, sidecar_path, write_csv, write_json,
                 write_volume)
from .metrics import dice, ms_ssim, psnr

log = logging.getLogger("tfk")

METRICS_HEADER = ["t_days", "modality", "dice", "psnr"]
SWEEP_HEADER = ["tau", "mean_dice", "mean_psnr"]
EVAL_HEADER = ["metric", "value", "mask_voxels", "t_days", "modality"]
DEFAULT_SWEEP = (0.05, 0.15, 0.5, 0.9)


class UsageError(Exception):
    """Bad flag values caught after argparse; exits with code 2."""


# -- helpers ----------------------------------------------------------------------------

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt_days(t: float) -> str:
    return f"{t:g}"


def _floats(text: str, flag: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated numbers, got {text!r}") from None


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise TfkError(f"cannot create output directory {out}: {exc.strerror}") from None
    if not os.access(out, os.W_OK):
        raise TfkError(f"output directory {out} is not writable")
    return out


def _read_tissue(path) -> TissueMap:
    vol = read_volume(path)
    if isinstance(vol, TissueMap):
        return vol
    if isinstance(vol, ScalarField3D):
        return TissueMap(vol.spec, np.rint(vol.values).astype(np.uint8))
    raise TfkError(f"{path}: expected a tissue map")


def _read_mask(path) -> LabelMask:
    vol = read_volume(path)
    if isinstance(vol, LabelMask):
        return vol
    if isinstance(vol, ScalarField3D):
        return concentration_to_mask(vol)
    return LabelMask(vol.spec, vol.values)


# flags that change how a run executes but never what it writes
_EXECUTION_FLAGS = {"--threads": 1, "--timing": 0, "-v": 0, "--verbose": 0}


def result_argv(argv) -> list[str]:
    """argv without execution-only flags, so the manifest is thread-count independent."""
    out, skip = [], 0
    for a in argv:
        if skip:
            skip -= 1
            continue
        name = a.split("=", 1)[0]
        if name in _EXECUTION_FLAGS:
            skip = 0 if "=" in a else _EXECUTION_FLAGS[name]
            continue
        out.append(a)
    return out


class Run:
    """Collects the manifest for one command invocation."""

    def __init__(self, args, argv):
        self.command = args.command
        self.argv = result_argv(argv)
        self.config: dict = {}
        self.seeds: dict = {}
        self.inputs: dict = {}
        self.started = time.perf_counter()
        self.timing = bool(getattr(args, "timing", False))

    def add_input(self, path) -> Path:
        p = Path(path)
        if not p.exists():
            raise TfkError(f"input {p} does not exist")
        self.inputs[str(p)] = _sha256(p)
        side = sidecar_path(p)
        if side.exists():
            self.inputs[str(side)] = _sha256(side)
        return p

    def finish(self, out: Path, manifest_name: str = "manifest.json") -> None:
        outputs = {}
        for p in sorted(out.rglob("*")):
            if p.is_file() and p.name != manifest_name and not p.name.startswith("."):
                outputs[p.relative_to(out).as_posix()] = _sha256(p)
        body = {"command": self.command, "argv": self.argv, "tool_version": __version__,
                "config": self.config, "seeds": self.seeds, "inputs": self.inputs,
                "outputs": outputs}
        elapsed = time.perf_counter() - self.started
        if self.timing:
            body["wall_clock_seconds"] = elapsed
        write_json(out / manifest_name, body)
        log.info("%s finished in %.1f s", self.command, elapsed)


# -- commands ---------------------------------------------------------------------------

def _growth_from_args(args, run: Run) -> GrowthParams:
    if args.growth:
        return GrowthParams.from_dict(read_json(run.add_input(args.growth)))
    if args.seed is None:
        raise UsageError("--seed x,y,z is required unless --growth is given")
    seed = _floats(args.seed, "--seed")
    if len(seed) != 3:
        raise UsageError(f"--seed: expected three coordinates, got {args.seed!r}")
    return GrowthParams(seed_center=tuple(seed), rho=args.rho, d_white=args.d,
                        gray_ratio=args.gray_ratio, seed_sigma=args.sigma,
                        seed_amplitude=args.amplitude)


def cmd_simulate(args, run: Run) -> int:
    tissue = _read_tissue(run.add_input(args.tissue))
    params = _growth_from_args(args, run)
    dt = args.dt or min(0.5, max_stable_dt(tissue.spec, params.d_max))
    clock = SimClock(dt=dt, t_end=args.t_end, snapshot_every=args.snapshot_every)
    out = _out_dir(args.out)
    run.config = {"growth": params.to_dict(), "dt": dt, "t_end": clock.t_end,
                  "snapshot_every": clock.snapshot_every,
                  "thresholds": [DEFAULT_POLICY.background_below,
                                 DEFAULT_POLICY.enhancing_at_or_above]}
    for t, c in simulate(tissue, params, clock):
        write_volume(out / f"conc_t{_fmt_days(t)}.f32", c)
        write_volume(out / f"mask_t{_fmt_days(t)}.u8", concentration_to_mask(c))
    write_json(out / "growth.json", params.to_dict())
    run.finish(out)
    return 0


def cmd_fit(args, run: Run) -> int:
    tissue = _read_tissue(run.add_input(args.tissue))
    target = _read_mask(run.add_input(args.target))
    grid = read_json(run.add_input(args.grid))
    search = SearchGrid.from_dict(grid)
    template = None
    if args.template:
        template = GrowthParams.from_dict(read_json(run.add_input(args.template)))
    t_end = args.t_end if args.t_end is not None else grid.get("t_end")
    if t_end is None:
        raise UsageError("--t-end is required when the grid file has no t_end")
    d_top = 2.0 * max(float(d) for d in search.d_white)  # descent may step past the grid
    dt = args.dt or grid.get("dt") or min(0.5, max_stable_dt(tissue.spec, d_top))
    clock = SimClock(dt=float(dt), t_end=float(t_end))
    res = fit_growth_params(target, tissue, search, clock, template=template,
                            threads=args.threads)
    out = Path(args.out)
    _out_dir(out.parent)
    write_json(out, {**res.params.to_dict(), "fit_dice": res.fit_dice,
                     "grid_dice": res.grid_dice, "evaluations": res.evaluations})
    run.config = {"t_end": clock.t_end, "dt": clock.dt, "search": {
        "rho": list(search.rho), "d_white": list(search.d_white),
        "seed_centers": [list(s) for s in search.seed_centers]}}
    run.finish(out.parent, manifest_name=out.stem + ".manifest.json")
    print(f"fit_dice={res.fit_dice:.6f} grid_dice={res.grid_dice:.6f}")
    return 0


def cmd_toy_data(args, run: Run) -> int:
    from .phantom import toy_dataset

    out = _out_dir(args.out)
    spec = GridSpec.cube(args.size)
    cases = toy_dataset(spec, args.n, seed=args.seed)
    pairs = []
    for i, c in enumerate(cases):
        stem = f"p{i:05d}"
        write_volume(out / f"{stem}_image.f32", ScalarField3D.from_array(spec, c.image),
                     intent="image")
        write_volume(out / f"{stem}_tissue.u8", c.tissue)
        write_volume(out / f"{stem}_conc.f32", c.conc)
        pairs.append({"image": f"{stem}_image.f32", "tissue": f"{stem}_tissue.u8",
                      "conc": f"{stem}_conc.f32", "modality": c.modality.name})
    write_json(out / "index.json", {"pairs": pairs})
    run.config = {"n": args.n, "size": args.size}
    run.seeds = {"data": args.seed}
    run.finish(out)
    return 0


def load_pairs(data_dir, run: Run | None = None):
    from .flowmatch import TrainingPair

    data_dir = Path(data_dir)
    index = data_dir / "index.json"
    if run is not None:
        run.add_input(index)
    pairs = []
    for rec in read_json(index)["pairs"]:
        image = read_volume(data_dir / rec["image"])
        tissue = _read_tissue(data_dir / rec["tissue"])
        conc = read_volume(data_dir / rec["conc"])
        pairs.append(TrainingPair(image.array[None].copy(),
                                  assemble(tissue, conc, Modality.parse(rec["modality"]))))
    return pairs


def model_and_config(cfg: dict):
    from .flowmatch import TrainConfig, VelocityModel

    tc = TrainConfig.from_dict(cfg)
    model = VelocityModel(hidden=int(cfg.get("hidden", 16)),
                          tau_freqs=int(cfg.get("tau_freqs", 8)),
                          modality_dim=int(cfg.get("modality_dim", 4)),
                          rng_seed=int(cfg.get("model_seed", 0)), dtype=np.float32)
    return model, tc


def cmd_train(args, run: Run) -> int:
    from .flowmatch import save_checkpoint, train

    cfg = read_json(run.add_input(args.cfg))
    pairs = load_pairs(args.data, run)
    model, tc = model_and_config(cfg)
    res = train(model, pairs, tc)
    out = Path(args.out)
    _out_dir(out.parent)
    save_checkpoint(out, res.model, res.ema, extra={"train": tc.to_dict()})
    write_csv(out.with_suffix(".loss.csv"), ["step", "loss"],
              ([i, repr(l)] for i, l in enumerate(res.losses)))
    run.config = {"train": tc.to_dict(), "model": model.config()}
    run.seeds = {"train": tc.rng_seed, "init": model.rng_seed}
    run.finish(out.parent, manifest_name=out.stem + ".manifest.json")
    return 0


def _load_model(path, run: Run, use_ema: bool = True):
    from .flowmatch import load_checkpoint

    model, ema, header = load_checkpoint(run.add_input(path))
    return (ema if (use_ema and ema is not None) else model), header


def write_bundle(bundle, out: Path) -> None:
    for i, t in enumerate(bundle.plan.time_points):
        write_volume(out / f"conc_t{_fmt_days(t)}.f32", bundle.concentrations[i])
    spec = bundle.tissue.spec
    for e in bundle.entries:
        tag = f"t{_fmt_days(e.t_days)}_{e.modality.name}"
        write_volume(out / f"image_{tag}.f32",
                     ScalarField3D(spec, e.volume[0].reshape(-1).astype(np.float64)),
                     intent="image")
        write_volume(out / f"mask_{tag}.u8", LabelMask(spec, e.mask.astype(np.uint8)))
    write_csv(out / "metrics.csv", METRICS_HEADER, metric_rows(bundle))


def metric_rows(bundle) -> list[list]:
    rows = []
    for e in sorted(bundle.entries, key=lambda e: (e.t_days, int(e.modality))):
        p = e.psnr_nontumor_vs_previous
        rows.append([_fmt_days(e.t_days), e.modality.name, repr(e.dice_vs_conditioning),
                     "" if p is None else repr(p)])
    return rows


def cmd_generate(args, run: Run) -> int:
    from .longitudinal import LongitudinalPlan, generate_trajectory

    model, _ = _load_model(args.model, run, not args.raw_weights)
    tissue = _read_tissue(run.add_input(args.tissue))
    params = GrowthParams.from_dict(read_json(run.add_input(args.growth)))
    plan = LongitudinalPlan.from_dict(read_json(run.add_input(args.plan)))
    out = _out_dir(args.out)
    bundle = generate_trajectory(model, tissue, params, plan, rng_seed=args.seed,
                                 dt=args.dt, threads=args.threads)
    write_bundle(bundle, out)
    run.config = {"plan": plan.to_dict(), "growth": params.to_dict(), "dt": args.dt}
    run.seeds = {"source": args.seed}
    run.finish(out)
    return 0


def cmd_sweep(args, run: Run) -> int:
    from .longitudinal import LongitudinalPlan, corruption_sweep

    model, _ = _load_model(args.model, run, not args.raw_weights)
    tissue = _read_tissue(run.add_input(args.tissue))
    params = GrowthParams.from_dict(read_json(run.add_input(args.growth)))
    plan = LongitudinalPlan.from_dict(read_json(run.add_input(args.plan)))
    taus = _floats(args.taus, "--taus")
    rows = corruption_sweep(model, tissue, params, plan, taus, rng_seed=args.seed,
                            dt=args.dt, threads=args.threads)
    out = Path(args.out)
    _out_dir(out.parent)
    write_csv(out, SWEEP_HEADER, (r.row() for r in rows))
    run.config = {"plan": plan.to_dict(), "growth": params.to_dict(), "taus": taus}
    run.seeds = {"source": args.seed}
    run.finish(out.parent, manifest_name=out.stem + ".manifest.json")
    return 0


def _parse_tag(name: str):
    # image_t12.5_FLAIR.f32 -> (12.5, "FLAIR"); conc_t0.f32 -> (0.0, None)
    stem = name.split(".")[0]
    t, mod = None, None
    for part in stem.split("_")[1:]:
        if part.startswith("t"):
            try:
                t = float(part[1:])
                continue
            except ValueError:
                pass
        try:
            mod = Modality.parse(part).name
        except ValueError:
            pass
    return t, mod


def evaluate_dirs(pred: Path, ref: Path) -> list[list]:
    """Compare every volume in ``pred`` with the same-named volume in ``ref``."""
    rows = []
    for p in sorted(pred.iterdir()):
        if p.name.endswith(".json") or p.name.startswith(".") or not p.is_file():
            continue
        r = ref / p.name
        if not r.exists() or not sidecar_path(p).exists():
            continue
        a, b = read_volume(p), read_volume(r)
        t, mod = _parse_tag(p.name)
        tail = ["" if t is None else repr(t), mod or ""]
        if isinstance(a, (LabelMask, TissueMap)):
            ra = a.values != 0
            rb = b.values != 0
            rows.append(["dice:" + p.name, repr(dice(ra, rb)), int((ra | rb).sum())] + tail)
            continue
        rows.append(["psnr:" + p.name, repr(psnr(a, b)), a.spec.size] + tail)
        try:
            rows.append(["ms_ssim:" + p.name, repr(ms_ssim(a, b)), a.spec.size] + tail)
        except TfkError:
            pass  # grid too small for the pyramid
        if p.name.startswith("conc_"):
            ma, mb = concentration_to_mask(a).whole_tumor(), concentration_to_mask(b).whole_tumor()
            rows.append(["dice:" + p.name, repr(dice(ma, mb)), int((ma | mb).sum())] + tail)
    return rows


def cmd_evaluate(args, run: Run) -> int:
    pred, ref = Path(args.pred), Path(args.ref)
    for d in (pred, ref):
        if not d.is_dir():
            raise TfkError(f"{d} is not a directory")
    rows = evaluate_dirs(pred, ref)
    if not rows:
        raise TfkError(f"no matching volumes between {pred} and {ref}")
    out = Path(args.out)
    _out_dir(out.parent)
    write_csv(out, EVAL_HEADER, rows)
    run.finish(out.parent, manifest_name=out.stem + ".manifest.json")
    return 0


def demo_config(args) -> dict:
    return {"grid": args.size, "pairs": args.pairs, "train_steps": args.train_steps,
            "batch": 4, "learning_rate": 3e-3, "ema_decay": 0.99, "hidden": args.hidden,
            "rho": 0.03, "d_white": 0.28, "time_points": [0.0, 15.0, 30.0, 45.0, 60.0],
            "tau_tilde": 0.15, "integrator_steps": args.integrator_steps,
            "modalities": [m.name for m in Modality], "sweep_taus": list(DEFAULT_SWEEP)}


def cmd_demo(args, run: Run) -> int:
    from .flowmatch import TrainConfig, VelocityModel, save_checkpoint, train
    from .longitudinal import LongitudinalPlan, corruption_sweep, run_trajectory
    from .phantom import make_phantom, to_training_pairs, toy_dataset

    out = _out_dir(args.out)
    cfg = demo_config(args)
    seed = args.seed
    spec = GridSpec.cube(cfg["grid"])
    log.info("demo: building %d training pairs on a %d^3 grid", cfg["pairs"], cfg["grid"])
    pairs = to_training_pairs(toy_dataset(spec, cfg["pairs"], seed=seed))
    model = VelocityModel(hidden=cfg["hidden"], rng_seed=seed, dtype=np.float32)
    tc = TrainConfig(steps=cfg["train_steps"], batch=cfg["batch"],
                     learning_rate=cfg["learning_rate"], ema_decay=cfg["ema_decay"],
                     rng_seed=seed)
    log.info("demo: training for %d steps", tc.steps)
    res = train(model, pairs, tc)
    save_checkpoint(out / "model.tfm", res.model, res.ema, extra={"train": tc.to_dict()})
    write_csv(out / "loss.csv", ["step", "loss"], ([i, repr(l)] for i, l in enumerate(res.losses)))

    tissue = make_phantom(spec)
    write_volume(out / "tissue.u8", tissue)
    c = tuple(float(v) for v in np.argwhere(tissue.array == 3).mean(axis=0)[::-1])
    seed_xyz = tuple(float(round(v)) for v in c)
    params = GrowthParams(seed_center=seed_xyz, rho=cfg["rho"], d_white=cfg["d_white"])
    write_json(out / "growth.json", params.to_dict())
    plan = LongitudinalPlan(tuple(cfg["time_points"]), cfg["tau_tilde"],
                            cfg["integrator_steps"], tuple(Modality))
    write_json(out / "plan.json", plan.to_dict())
    dt = min(0.5, max_stable_dt(spec, params.d_max))
    concs = [f for _, f in simulate_at(tissue, params, plan.time_points, dt)]

    log.info("demo: generating %d time points", len(plan.time_points))
    bundle = run_trajectory(res.ema, tissue, concs, plan, rng_seed=seed, threads=args.threads)
    write_bundle(bundle, out)

    log.info("demo: corruption sweep over %s", cfg["sweep_taus"])
    rows = corruption_sweep(res.ema, tissue, params, plan, cfg["sweep_taus"], rng_seed=seed,
                            dt=dt, threads=args.threads)
    write_csv(out / "sweep.csv", SWEEP_HEADER, (r.row() for r in rows))

    # evaluate: generated image at each follow-up vs its predecessor
    ev = []
    for m in plan.modalities:
        for t0, t1 in zip(plan.time_points, plan.time_points[1:]):
            a, b = bundle.get(t0, m).volume[0], bundle.get(t1, m).volume[0]
            ev.append(["ms_ssim_vs_previous", repr(ms_ssim(a, b, levels=1)), spec.size,
                       repr(t1), m.name])
    write_csv(out / "evaluation.csv", EVAL_HEADER, ev)

    run.config = {**cfg, "sim_dt": dt, "growth": params.to_dict(), "train": tc.to_dict()}
    run.seeds = {"demo": seed}
    run.finish(out)
    return 0


def cmd_replay(args, run: Run) -> int:
    rec = read_json(args.manifest)
    argv = list(rec["argv"])
    if "--out" in argv and args.out:
        argv[argv.index("--out") + 1] = args.out
    return main(argv)


# -- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $TFK_THREADS or 1); results do not "
                             "depend on this value")
    common.add_argument("--timing", action="store_true",
                        help="record wall-clock duration in the manifest (breaks bitwise "
                             "equality of manifests between runs)")
    common.add_argument("-v", "--verbose", action="store_true", help="progress logging")

    p = argparse.ArgumentParser(prog="tfk", description="Tumor growth simulation and "
                                "flow-matching longitudinal synthesis toolkit.")
    p.add_argument("--version", action="version", version=f"tfk {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    s = sub.add_parser("simulate", parents=[common], help="run the growth solver")
    s.add_argument("--tissue", required=True, help="tissue map volume (u8 + sidecar)")
    s.add_argument("--growth", default=None, help="growth parameters JSON (replaces the "
                   "individual parameter flags)")
    s.add_argument("--rho", type=float, default=0.03, help="proliferation rate, 1/day")
    s.add_argument("--d", type=float, default=0.28, help="white-matter diffusivity, mm^2/day")
    s.add_argument("--gray-ratio", type=float, default=0.1, help="gray/white diffusivity ratio")
    s.add_argument("--seed", default=None, help="seed center x,y,z in voxel coordinates")
    s.add_argument("--sigma", type=float, default=2.0, help="seed Gaussian width, mm")
    s.add_argument("--amplitude", type=float, default=1.0, help="seed peak concentration")
    s.add_argument("--dt", type=float, default=None, help="time step in days (default: "
                   "min(0.5, stability bound))")
    s.add_argument("--t-end", type=float, required=True, help="horizon in days")
    s.add_argument("--snapshot-every", type=float, default=None,
                   help="days between snapshots (default: only t=0 and t_end)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", parents=[common], help="calibrate growth parameters to a mask")
    s.add_argument("--target", required=True, help="target mask or concentration volume")
    s.add_argument("--tissue", required=True, help="tissue map volume")
    s.add_argument("--grid", required=True, help="search grid JSON with rho, d_white, "
                   "seed_centers and optionally t_end, dt")
    s.add_argument("--t-end", type=float, default=None, help="days between seed and target")
    s.add_argument("--template", default=None, help="growth JSON supplying unfitted fields")
    s.add_argument("--dt", type=float, default=None, help="time step in days")
    s.add_argument("--out", required=True, help="output JSON path")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("toy-data", parents=[common], help="write a synthetic training set")
    s.add_argument("--n", type=int, default=500, help="number of pairs")
    s.add_argument("--size", type=int, default=16, help="cube edge in voxels")
    s.add_argument("--seed", type=int, default=0, help="dataset seed")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_toy_data)

    s = sub.add_parser("train", parents=[common], help="train the velocity model")
    s.add_argument("--data", required=True, help="directory with index.json (see toy-data)")
    s.add_argument("--cfg", required=True, help="training config JSON")
    s.add_argument("--out", required=True, help="checkpoint path (.tfm)")
    s.set_defaults(func=cmd_train)

    for name, fn, hlp in (("generate", cmd_generate, "synthesize a longitudinal sequence"),
                          ("sweep", cmd_sweep, "corruption-level sweep")):
        s = sub.add_parser(name, parents=[common], help=hlp)
        s.add_argument("--model", required=True, help="checkpoint (.tfm)")
        s.add_argument("--tissue", required=True, help="tissue map volume")
        s.add_argument("--growth", required=True, help="growth parameters JSON")
        s.add_argument("--plan", required=True, help="longitudinal plan JSON")
        s.add_argument("--seed", type=int, default=0, help="source-noise seed")
        s.add_argument("--dt", type=float, default=None, help="growth time step in days")
        s.add_argument("--raw-weights", action="store_true",
                       help="use the raw weights instead of the EMA copy")
        if name == "generate":
            s.add_argument("--out", required=True, help="output directory")
        else:
            s.add_argument("--taus", default=",".join(map(str, DEFAULT_SWEEP)),
                           help="comma-separated corruption levels")
            s.add_argument("--out", required=True, help="output CSV path")
        s.set_defaults(func=fn)

    s = sub.add_parser("evaluate", parents=[common], help="compare two output directories")
    s.add_argument("--pred", required=True, help="directory of predicted volumes")
    s.add_argument("--ref", required=True, help="directory of reference volumes")
    s.add_argument("--out", required=True, help="output CSV path")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("demo", parents=[common], help="end-to-end synthetic experiment")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=0, help="master seed")
    s.add_argument("--size", type=int, default=16, help="phantom cube edge in voxels")
    s.add_argument("--pairs", type=int, default=64, help="training pairs")
    s.add_argument("--train-steps", type=int, default=300, help="training steps")
    s.add_argument("--hidden", type=int, default=16, help="hidden channels")
    s.add_argument("--integrator-steps", type=int, default=20, help="ODE steps per leg")
    s.set_defaults(func=cmd_demo)

    s = sub.add_parser("replay", parents=[common], help="re-run a recorded manifest")
    s.add_argument("--manifest", required=True, help="manifest JSON")
    s.add_argument("--out", default=None, help="override the recorded output location")
    s.set_defaults(func=cmd_replay)
    return p


def _limit_blas():
    # BLAS pools can split reductions differently per thread count; pin them.
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(limits=1)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="tfk: %(message)s", stream=sys.stderr)
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    args.threads = resolve_threads(args.threads)
    limiter = _limit_blas()
    try:
        return int(args.func(args, Run(args, argv)) or 0)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"tfk: error: {exc}", file=sys.stderr)
        return 2
    except (TfkError, OSError, ValueError, KeyError) as exc:
        print(f"tfk {args.command}: error: {exc}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
