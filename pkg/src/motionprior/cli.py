"""Command-line driver wiring every module into six subcommands.

gen-data  synthesize a clip dataset with train/val/test splits
train     fit the transition model and the initial-state mixture
sample    roll out prior-sampled motions from held-out initial states
fit       run test-time optimization on saved observation problems
eval      score estimated motions against references
check     run the gradient self-check registry

Each subcommand reads an optional JSON config (--config) whose keys may
be overridden with flat ``--key value`` pairs; values parse as JSON with
a plain-string fallback. MOTIONPRIOR_SEED overrides the seed everywhere.
Exit codes: 0 success, 2 bad configuration, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import json
import logging
import os
import sys

import numpy as np
import torch

from . import fitting as ft
from . import state as st
from .checks import CheckContext, CHECKS, run_checks
from .data import (
    FAMILIES,
    MotionClip,
    generate_dataset,
    load_clip,
    load_dataset,
    save_clip,
    save_dataset,
)
from .diffcore import set_gradient_fault
from .gmm import fit_em, load_gmm, save_gmm
from .kinematics import GroundPlane, default_skeleton, fk_state_pose, skeleton_hash
from .metrics import (
    EvalReport,
    accel,
    contact_accuracy,
    leg_joint_ids,
    penetration,
    positional_errors,
    write_line_svg,
)
from .model import CvaeModel, RolloutDivergenceError, load_model, save_model
from .training import LossWeights, TrainSchedule, load_curves, save_curves, train_cvae

log = logging.getLogger(__name__)


class ConfigError(Exception):
    """Bad configuration value or missing input; maps to exit code 2."""


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------


def _parse_overrides(extra: list) -> dict:
    out = {}
    i = 0
    while i < len(extra):
        flag = extra[i]
        if not flag.startswith("--") or len(flag) == 2:
            raise ConfigError(f"expected --key, got {flag!r}")
        if i + 1 >= len(extra):
            raise ConfigError(f"override {flag} is missing a value")
        raw = extra[i + 1]
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out[flag[2:].replace("-", "_")] = value
        i += 2
    return out


def load_config(defaults: dict, config_path, overrides: dict) -> dict:
    cfg = dict(defaults)
    if config_path is not None:
        try:
            with open(config_path) as f:
                doc = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {config_path} is not valid JSON: {e}")
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, value in doc.items():
            if key not in cfg:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = value
    for key, value in overrides.items():
        if key not in cfg:
            raise ConfigError(f"unknown override --{key}")
        cfg[key] = value
    env_seed = os.environ.get("MOTIONPRIOR_SEED")
    if env_seed is not None and "seed" in cfg:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"MOTIONPRIOR_SEED must be an integer, got {env_seed!r}")
    return cfg


def _require(cfg: dict, key: str):
    if cfg.get(key) in (None, ""):
        raise ConfigError(f"{key} is required")
    return cfg[key]


def _int(cfg: dict, key: str, minimum: int = 0) -> int:
    try:
        value = int(cfg[key])
    except (TypeError, ValueError):
        raise ConfigError(f"{key} must be an integer, got {cfg[key]!r}")
    if value < minimum:
        raise ConfigError(f"{key} must be >= {minimum}")
    return value


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

GEN_DATA_DEFAULTS = {
    "out": "dataset",
    "seed": 0,
    "families": {name: 4 for name in FAMILIES},
    "duration": 3.0,
    "split_fractions": [0.8, 0.1, 0.1],
}


def cmd_gen_data(cfg: dict) -> int:
    families = cfg["families"]
    if not isinstance(families, dict) or not families:
        raise ConfigError("families must be a non-empty {name: count} object")
    for name, count in families.items():
        if name not in FAMILIES:
            raise ConfigError(f"unknown motion family {name!r}; choose from {FAMILIES}")
        if not isinstance(count, int) or count < 1:
            raise ConfigError(f"family {name} needs a positive clip count")
    fractions = tuple(float(v) for v in cfg["split_fractions"])
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError("split_fractions must be three values summing to 1")
    duration = float(cfg["duration"])
    seed = _int(cfg, "seed")
    splits = generate_dataset(families, duration, seed, split_fractions=fractions)
    save_dataset(cfg["out"], splits, seed, families)
    counts = {name: len(clips) for name, clips in splits.items()}
    log.info("dataset written to %s: %s", cfg["out"], counts)
    print(f"gen-data: {sum(counts.values())} clips -> {cfg['out']} {counts}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

TRAIN_DEFAULTS = {
    "dataset": None,
    "out": "run",
    "seed": 0,
    "width": 256,
    "groups": 16,
    "schedule": {},
    "loss": {},
    "gmm_k": 12,
    "gmm_stride": 2,
    # init vectors sit on low-dimensional manifolds, so full covariances need
    # a stiffer floor than the fit_em default to stay numerically PD
    "gmm_reg": 1e-3,
    "resume": None,
}


def _init_vectors(clips, stride: int) -> np.ndarray:
    rows = []
    for clip in clips:
        canon, _ = st.canonicalize(clip.states[::stride])
        rows.append(st.init_state_vector(canon).numpy())
    return np.concatenate(rows, axis=0)


def cmd_train(cfg: dict) -> int:
    dataset_dir = _require(cfg, "dataset")
    try:
        splits = load_dataset(dataset_dir)
    except FileNotFoundError:
        raise ConfigError(f"dataset not found at {dataset_dir}")
    if not splits.get("train") or not splits.get("val"):
        raise ConfigError("dataset must provide non-empty train and val splits")
    skel = default_skeleton()
    skel_hash = skeleton_hash(skel)
    if splits["train"][0].skel_hash != skel_hash:
        raise ConfigError("dataset was generated for a different skeleton")

    try:
        schedule = dataclasses.replace(TrainSchedule.desk(), **{
            k: (tuple(tuple(s) for s in v) if k == "lr_stages" else v)
            for k, v in dict(cfg["schedule"]).items()
        })
        weights = LossWeights(**dict(cfg["loss"]))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad schedule/loss settings: {e}")

    seed = _int(cfg, "seed")
    os.makedirs(cfg["out"], exist_ok=True)
    curves_path = os.path.join(cfg["out"], "curves.csv")

    epoch_offset = 0
    prev_rows: list = []
    if cfg["resume"]:
        ckpt = os.path.join(cfg["resume"], "checkpoint.model")
        if not os.path.exists(ckpt):
            raise ConfigError(f"no checkpoint to resume at {ckpt}")
        model = load_model(ckpt)
        old_curves = os.path.join(cfg["resume"], "curves.csv")
        if os.path.exists(old_curves):
            prev_rows = load_curves(old_curves)
            epoch_offset = int(prev_rows[-1]["epoch"])
        log.info("resuming from %s at epoch %d", ckpt, epoch_offset)
    else:
        model = CvaeModel(width=_int(cfg, "width", 1), groups=_int(cfg, "groups", 1),
                          seed=seed, skel_hash=skel_hash)

    model, rows = train_cvae(model, splits, schedule, weights, seed=seed + epoch_offset,
                             skeleton=skel)
    if epoch_offset:
        # the fresh epoch-0 row re-measures the resumed checkpoint; drop it
        rows = [{**row, "epoch": row["epoch"] + epoch_offset} for row in rows[1:]]
    save_curves(prev_rows + rows, curves_path)
    model.train_meta["epochs_done"] = epoch_offset + schedule.epochs
    save_model(model, os.path.join(cfg["out"], "checkpoint.model"), meta=model.train_meta)

    vectors = _init_vectors(splits["train"], _int(cfg, "gmm_stride", 1))
    k = _int(cfg, "gmm_k", 1)
    if vectors.shape[0] < k:
        raise ConfigError(f"only {vectors.shape[0]} initial-state vectors for k={k}")
    gmm = fit_em(vectors, k=k, seed=seed, reg=float(cfg["gmm_reg"]))
    save_gmm(gmm, os.path.join(cfg["out"], "init.gmm"),
             meta={"k": k, "vectors": int(vectors.shape[0]), "stride": cfg["gmm_stride"]})

    last = rows[-1] if rows else prev_rows[-1]
    print(f"train: {epoch_offset + schedule.epochs} epochs -> {cfg['out']} "
          f"(val_rec {last.get('val_rec', float('nan')):.6g}, "
          f"contact acc {last.get('val_contact_acc', float('nan')):.3f}, "
          f"gmm {k} components on {vectors.shape[0]} vectors)")
    return 0


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------

SAMPLE_DEFAULTS = {
    "checkpoint": None,
    "dataset": None,
    "split": "test",
    "out": "samples",
    "count": 50,
    "frames": 150,
    "seed": 0,
}


def cmd_sample(cfg: dict) -> int:
    model = load_model(_require(cfg, "checkpoint"))
    try:
        splits = load_dataset(_require(cfg, "dataset"))
    except FileNotFoundError:
        raise ConfigError(f"dataset not found at {cfg['dataset']}")
    clips = splits.get(cfg["split"]) or []
    if not clips:
        raise ConfigError(f"split {cfg['split']!r} is empty")
    if model.skel_hash and clips[0].skel_hash != model.skel_hash:
        raise ConfigError("checkpoint and dataset use different skeletons")

    count = _int(cfg, "count", 1)
    frames = _int(cfg, "frames", 2)
    seed = _int(cfg, "seed")
    gen = torch.Generator().manual_seed(seed)
    os.makedirs(cfg["out"], exist_ok=True)
    for i in range(count):
        source = clips[i % len(clips)]
        x = source.states[0]
        states = [x]
        contacts = [source.contacts[0]]
        with torch.no_grad():
            for t in range(frames - 1):
                x, probs, _ = model.sample_transition(x, gen)
                if not bool(torch.isfinite(x).all()):
                    raise RolloutDivergenceError(t + 1)
                states.append(x)
                contacts.append((probs >= 0.5).to(torch.float64))
        clip = MotionClip(
            frame_rate=source.frame_rate,
            states=torch.stack(states),
            contacts=torch.stack(contacts),
            beta=source.beta,
            family="sample",
            seed=seed + i,
            skel_hash=source.skel_hash,
        )
        save_clip(clip, os.path.join(cfg["out"], f"sample_{i:04d}.mclip"))
    print(f"sample: {count} motions of {frames} frames -> {cfg['out']}")
    return 0


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

FIT_DEFAULTS = {
    "checkpoint": None,
    "gmm": None,
    "problems": None,
    "out": "fits",
    "init_only": False,
    "seed": 0,
}


def _problem_paths(spec: str) -> list:
    if os.path.isdir(spec):
        paths = sorted(glob.glob(os.path.join(spec, "*.problem")))
    else:
        paths = sorted(glob.glob(spec))
    if not paths:
        raise ConfigError(f"no problem files match {spec!r}")
    return paths


def cmd_fit(cfg: dict) -> int:
    skel = default_skeleton()
    init_only = bool(cfg["init_only"])
    model = gmm = None
    if not init_only:
        model = load_model(_require(cfg, "checkpoint"))
        gmm = load_gmm(_require(cfg, "gmm"))
        if model.skel_hash and model.skel_hash != skeleton_hash(skel):
            raise ConfigError("checkpoint was trained for a different skeleton")
    os.makedirs(cfg["out"], exist_ok=True)

    for path in _problem_paths(_require(cfg, "problems")):
        problem = ft.load_fit_problem(path)
        declared = problem.meta.get("skeleton_hash")
        if declared and model is not None and declared != model.skel_hash:
            raise ConfigError(f"{path}: problem and checkpoint skeleton hashes differ")
        name = os.path.splitext(os.path.basename(path))[0]
        if init_only:
            result = ft.fit_init_only(problem.obs, problem.camera, skel,
                                      problem.weights, problem.g_init)
        else:
            result = ft.fit(model, gmm, problem.obs, camera=problem.camera,
                            skeleton=skel, weights=problem.weights,
                            g_init=problem.g_init, stages=problem.stages)
        ft.save_fit_result(os.path.join(cfg["out"], name), result, skel)
        stage_note = " warn" if result.warning else ""
        print(f"fit: {name} energy {result.final_energy:.6g}{stage_note}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

EVAL_DEFAULTS = {
    "est": None,
    "ref": None,
    "problems": None,
    "out": "eval",
    "svg": False,
}


def _motion_files(spec: str) -> list:
    if os.path.isdir(spec):
        paths = sorted(glob.glob(os.path.join(spec, "*.motion"))
                       + glob.glob(os.path.join(spec, "*.mclip")))
    else:
        paths = sorted(glob.glob(spec))
    if not paths:
        raise ConfigError(f"no motion files match {spec!r}")
    return paths


def _find_ref(ref_dir: str, name: str) -> str:
    for ext in (".mclip", ".motion"):
        candidate = os.path.join(ref_dir, name + ext)
        if os.path.exists(candidate):
            return candidate
    raise ConfigError(f"no reference motion named {name} under {ref_dir}")


def _marker_visibility(problem) -> torch.Tensor | None:
    if problem is not None and problem.obs.variant == "keypoints3d":
        return problem.obs.visibility
    return None


def cmd_eval(cfg: dict) -> int:
    skel = default_skeleton()
    legs = leg_joint_ids(skel)
    toes = list(skel.contact_joint_ids[:2])
    report = EvalReport()
    ref_dir = _require(cfg, "ref")

    for path in _motion_files(_require(cfg, "est")):
        name = os.path.splitext(os.path.basename(path))[0]
        est = load_clip(path, validate=False)
        ref = load_clip(_find_ref(ref_dir, name), validate=False)
        if est.num_frames != ref.num_frames:
            raise ConfigError(f"{name}: {est.num_frames} frames vs "
                              f"{ref.num_frames} reference frames")
        problem = None
        if cfg["problems"]:
            candidate = os.path.join(cfg["problems"], name + ".problem")
            if os.path.exists(candidate):
                problem = ft.load_fit_problem(candidate)

        pred_j, true_j = est.joints(), ref.joints()
        joint_vis = torch.ones(pred_j.shape[:2], dtype=torch.bool)
        if problem is not None and problem.obs.variant == "joints3d":
            joint_vis = problem.obs.visibility
        row = positional_errors(pred_j, true_j, joint_vis, legs)
        marker_vis = _marker_visibility(problem)
        if marker_vis is not None:
            pred_m = fk_state_pose(skel, est.states, est.beta, with_markers=True)[1]
            true_m = fk_state_pose(skel, ref.states, ref.beta, with_markers=True)[1]
            split = positional_errors(pred_m, true_m, marker_vis, [])
            row["vis"], row["occ"] = split["vis"], split["occ"]

        sidecar_path = os.path.splitext(path)[0] + ".json"
        g = [0.0, 0.0, 0.0]
        if os.path.exists(sidecar_path):
            with open(sidecar_path) as f:
                g = json.load(f).get("g", g)
        plane = GroundPlane(g=torch.tensor(g, dtype=torch.float64))
        freq, dist = penetration(est.joints()[:, toes, :], plane)
        report.add(
            name,
            err_all_cm=row["all"], err_vis_cm=row["vis"], err_occ_cm=row["occ"],
            err_legs_cm=row["legs"],
            accel_est=float(accel(pred_j).mean()) if est.num_frames > 2 else 0.0,
            accel_ref=float(accel(true_j).mean()) if ref.num_frames > 2 else 0.0,
            pen_freq=freq, pen_dist_cm=dist,
            contact_acc=contact_accuracy(est.contacts, ref.contacts),
        )

    os.makedirs(cfg["out"], exist_ok=True)
    report.save_json(os.path.join(cfg["out"], "report.json"))
    report.save_csv(os.path.join(cfg["out"], "report.csv"))
    if cfg["svg"]:
        svg_dir = os.path.join(cfg["out"], "svg")
        os.makedirs(svg_dir, exist_ok=True)
        keys = sorted({k for row in report.sequences for k in row if k != "name"})
        for key in keys:
            series = {key: [row[key] for row in report.sequences if key in row]}
            write_line_svg(os.path.join(svg_dir, f"{key}.svg"), series)
    agg = report.aggregate()
    print("eval: " + " ".join(f"{k} {v:.4g}" for k, v in sorted(agg.items())))
    return 0


# ---------------------------------------------------------------------------
# check
# ---------------------------------------------------------------------------

CHECK_DEFAULTS = {
    "instances": 20,
    "seed": 0,
    "names": None,
    "width": 32,
    "groups": 2,
    "fault": 0.0,
}


def cmd_check(cfg: dict) -> int:
    names = cfg["names"]
    if names is not None:
        unknown = [n for n in names if n not in CHECKS]
        if unknown:
            raise ConfigError(f"unknown check names {unknown}; choose from {list(CHECKS)}")
    ctx = CheckContext(width=_int(cfg, "width", 1), groups=_int(cfg, "groups", 1),
                       seed=_int(cfg, "seed"))
    set_gradient_fault(float(cfg["fault"]))
    try:
        results = run_checks(ctx, names=names, instances=_int(cfg, "instances", 1),
                             seed=_int(cfg, "seed"))
    finally:
        set_gradient_fault(0.0)
    all_ok = True
    for name in names if names is not None else CHECKS:
        errs = [r.error for r in results if r.name == name]
        tol = CHECKS[name][1]
        ok = max(errs) < tol
        all_ok &= ok
        print(f"check: {name:11s} worst {max(errs):.3e} tol {tol:g} "
              f"{'ok' if ok else 'FAIL'}")
    if not all_ok:
        print("check: FAILED")
        return 3
    print("check: all passed")
    return 0


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

COMMANDS = {
    "gen-data": (cmd_gen_data, GEN_DATA_DEFAULTS),
    "train": (cmd_train, TRAIN_DEFAULTS),
    "sample": (cmd_sample, SAMPLE_DEFAULTS),
    "fit": (cmd_fit, FIT_DEFAULTS),
    "eval": (cmd_eval, EVAL_DEFAULTS),
    "check": (cmd_check, CHECK_DEFAULTS),
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = argparse.ArgumentParser(prog="motionprior", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
    args, extra = parser.parse_known_args(argv)
    handler, defaults = COMMANDS[args.command]
    try:
        cfg = load_config(defaults, args.config, _parse_overrides(extra))
        return handler(cfg)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (RolloutDivergenceError, RuntimeError, ArithmeticError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
