"""Command-line entry point.

Every configuration key is also a flag (``--mass-hat 0.3``); values given on
the command line override the config file, which overrides the defaults.
``PSSCLF_OUTPUT_DIR`` overrides the output directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .certify import _jsonable
from .config import ConfigError, ExperimentConfig, build_setup, from_mapping, load_config, save_config
from .dynamics import Trajectory
from .experiments import (TrackingComparison, bounds_along, certify_regulation, compare_tracking,
                          heatmap, qp_tracking_controller, simulate, uncertainty_model)
from .learn import AugmentedController, ResidualEstimators, daclyf
from .uncertainty import Dataset, dataset_slack

EXIT_OK, EXIT_CONFIG, EXIT_CERT_FAIL, EXIT_UNBOUNDED = 0, 2, 3, 4
WEIGHTS_FORMAT = "pssclf-weights-v1"

log = logging.getLogger("pssclf")


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _versions() -> dict:
    return {"pssclf": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


# ---------------------------------------------------------------------------
# configuration

def _flag(name):
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("-v", "--verbose", action="store_true")
    cfg_group = common.add_argument_group("configuration keys")
    for f in fields(ExperimentConfig):
        nargs = 2 if "tuple" in str(f.type) else None
        cfg_group.add_argument(_flag(f.name), dest=f"cfg_{f.name}", nargs=nargs, default=None,
                               metavar=f.name.upper())

    p = argparse.ArgumentParser(prog="pssclf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("learn", parents=[common], help="run the episodic learning loop and export artifacts")

    s = sub.add_parser("simulate", parents=[common], help="simulate one controller on the true system")
    s.add_argument("--controller", choices=("pd", "qp", "learned"), default="pd")
    s.add_argument("--run-dir", help="directory with weights.json (for --controller learned)")
    s.add_argument("--out", help="output CSV (default: <output_dir>/simulate_<controller>.csv)")

    c = sub.add_parser("certify", parents=[common], help="boundary check and invariance simulation")
    c.add_argument("--controller", choices=("qp", "pd", "learned"), default="qp")
    c.add_argument("--run-dir", help="directory with weights.json (for --controller learned)")
    c.add_argument("--cert-dt", type=float, default=2e-4, help="time step of the data-collection runs")
    c.add_argument("--starts", type=int, default=120, help="number of data-collection runs")
    c.add_argument("--out", help="report path (default: <output_dir>/certification.json)")

    h = sub.add_parser("heatmap", parents=[common], help="disturbance-bound grids from a learn run")
    h.add_argument("--run-dir", required=True)

    m = sub.add_parser("compare", parents=[common], help="tracking metrics of two trajectory CSVs")
    m.add_argument("--baseline", required=True)
    m.add_argument("--final", required=True)
    m.add_argument("--out", help="metrics CSV (default: <output_dir>/tracking.csv)")
    return p


def resolve_config(args) -> ExperimentConfig:
    values = {}
    lines = None
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        cfg_file, lines = load_config(args.config)
        values = cfg_file.to_dict()
    for f in fields(ExperimentConfig):
        v = getattr(args, f"cfg_{f.name}")
        if v is not None:
            values[f.name] = v
    env_dir = os.environ.get("PSSCLF_OUTPUT_DIR")
    if env_dir:
        values["output_dir"] = env_dir
    cfg = from_mapping(values)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# persistence helpers

def save_weights(path, estimators: ResidualEstimators, trust_weight: float):
    _write_json(path, {"format": WEIGHTS_FORMAT, "trust_weight": trust_weight,
                       "estimators": estimators.to_dict()})


def load_weights(path):
    with open(path) as fh:
        d = json.load(fh)
    if d.get("format") != WEIGHTS_FORMAT:
        raise ConfigError(f"{path}: not a weights file (format {d.get('format')!r})")
    return ResidualEstimators.from_dict(d["estimators"]), float(d["trust_weight"])


def learned_controller(setup, run_dir):
    if not run_dir:
        raise ConfigError("--run-dir is required for the learned controller")
    path = Path(run_dir) / "weights.json"
    if not path.exists():
        raise ConfigError(f"weights not found: {path}")
    est, w = load_weights(path)
    cfg = setup.config
    return AugmentedController(setup.baseline, setup.clf, setup.est_sys, est, w, setup.reference,
                               cfg.u_max), est


# ---------------------------------------------------------------------------
# subcommands

def cmd_learn(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    setup = build_setup(cfg)
    baseline_traj = simulate(setup, setup.baseline)
    baseline_traj.save_csv(out / "baseline_trajectory.csv")
    manifest = {
        "config": cfg.to_dict(),
        "config_sha256": cfg.digest(),
        "versions": _versions(),
        "seeds": {"seed": cfg.seed, "true_seed": cfg.seed if cfg.true_seed is None else cfg.true_seed},
        "true_params": {"mass": setup.true.mass, "length": setup.true.length},
        "clf": setup.clf.to_dict(),
        "episodes": [],
    }
    if cfg.episodes > 0:
        save_config(cfg, out / "config.ini")
        res = daclyf(cfg, setup, progress=lambda r: log.info(
            "episode %d done: |D|=%d, held-out loss %.4g -> %.4g", r.episode, r.n_samples,
            r.holdout_loss_before, r.holdout_loss_after))
        start = 0
        for rec, traj in zip(res.episodes, res.trajectories):
            n = len(traj.inputs)
            res.dataset.subset(range(start, start + n)).save_jsonl(out / f"episode_{rec.episode:02d}_dataset.jsonl")
            traj.save_csv(out / f"episode_{rec.episode:02d}_trajectory.csv")
            start += n
        res.dataset.save_jsonl(out / "dataset.jsonl")
        np.savetxt(out / "holdout_mask.txt", res.holdout.astype(int), fmt="%d")
        save_weights(out / "weights.json", res.estimators, res.controller.weight)
        final_traj = simulate(setup, res.controller)
        final_traj.save_csv(out / "final_trajectory.csv")
        cmp = compare_tracking(baseline_traj, final_traj, setup.reference)
        cmp.save_csv(out / "tracking.csv")
        outcome = certify_regulation(setup, "learned", res.estimators)
        outcome.report.save_json(out / "certification.json")
        manifest.update({
            "episodes": [r.to_dict() for r in res.episodes],
            "trust_weights": list(res.schedule.weights),
            "label_slack_C": res.label_C,
            "tracking": {"baseline_mean": cmp.baseline_mean, "final_mean": cmp.final_mean,
                         "ratio": cmp.ratio},
            "certification": {"level": outcome.report.level, "passed": outcome.report.passed,
                              "worst_margin": outcome.report.worst_margin, "mu": outcome.report.mu,
                              "invariance_passed": None if outcome.invariance is None
                              else outcome.invariance.passed},
        })
    manifest["files"] = {p.name: _sha256(p) for p in sorted(out.iterdir())
                         if p.is_file() and p.name != "manifest.json"}
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_simulate(cfg, args) -> int:
    setup = build_setup(cfg)
    if args.controller == "pd":
        ctrl = setup.baseline
    elif args.controller == "qp":
        ctrl = qp_tracking_controller(setup)
    else:
        ctrl, _ = learned_controller(setup, args.run_dir)
    traj = simulate(setup, ctrl)
    path = Path(args.out or Path(cfg.output_dir) / f"simulate_{args.controller}.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    traj.save_csv(path)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_certify(cfg, args) -> int:
    setup = build_setup(cfg)
    est = None
    if args.controller == "learned":
        _, est = learned_controller(setup, args.run_dir)
    outcome = certify_regulation(setup, args.controller, est, dt=args.cert_dt, n_starts=args.starts)
    path = Path(args.out or Path(cfg.output_dir) / "certification.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    report = outcome.report
    payload = report.to_dict()
    payload["invariance"] = None if outcome.invariance is None else outcome.invariance.__dict__
    _write_json(path, payload)
    print(f"level={report.level} worst_margin={report.worst_margin:.6g} mu={report.mu:.6g} "
          f"passed={report.passed}")
    if outcome.invariance is not None:
        inv = outcome.invariance
        print(f"invariance: {inv.n_trajectories} runs, {inv.n_escaped} escaped, max V={inv.max_V:.6g}")
    if report.unbounded_everywhere:
        return EXIT_UNBOUNDED
    return EXIT_OK if report.passed else EXIT_CERT_FAIL


def cmd_heatmap(cfg, args) -> int:
    run = Path(args.run_dir)
    for name in ("dataset.jsonl", "weights.json", "manifest.json"):
        if not (run / name).exists():
            raise ConfigError(f"{run / name} not found; run `pssclf learn` first")
    setup = build_setup(cfg)
    data = Dataset.load_jsonl(run / "dataset.jsonl")
    with open(run / "manifest.json") as fh:
        C = float(json.load(fh)["label_slack_C"])
    slack = cfg.vdot_slack if cfg.vdot_slack is not None else dataset_slack(
        data, C, setup.clf, setup.est_sys, cfg.dt, setup.reference)
    final_ctrl, est = learned_controller(setup, run)
    qp = qp_tracking_controller(setup)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    all_unbounded = True
    bounds = {}
    for name, ctrl, estimators in (("qp", qp, None), ("final", final_ctrl, est)):
        model = uncertainty_model(setup, data, estimators, slack)
        grid = heatmap(data, model, ctrl, cfg.heatmap_points, cfg.heatmap_per_point, cfg.heatmap_sigma,
                       cfg.theta_range, cfg.omega_range,
                       (cfg.heatmap_bins_theta, cfg.heatmap_bins_omega), cfg.seed)
        grid.save_csv(out / f"heatmap_{name}.csv")
        all_unbounded &= bool(np.all(grid.unbounded[grid.count > 0]))
        traj = simulate(setup, ctrl)
        bounds[name] = bounds_along(model, traj)
        bounds["t"] = traj.t[:-1]
    with open(out / "bounds_along.csv", "w") as fh:
        fh.write("# schema=bounds-along-v1\nt,bound_qp,bound_final\n")
        for row in zip(bounds["t"], bounds["qp"], bounds["final"]):
            fh.write(",".join(format(float(v), ".17g") for v in row) + "\n")
    frac = float(np.mean(bounds["final"] < bounds["qp"]))
    print(f"wrote {out}; final bound below QP bound at {frac:.1%} of steps")
    return EXIT_UNBOUNDED if all_unbounded else EXIT_OK


def cmd_compare(cfg, args) -> int:
    setup = build_setup(cfg)
    tb, tf = Trajectory.load_csv(args.baseline), Trajectory.load_csv(args.final)
    try:
        cmp = compare_tracking(tb, tf, setup.reference)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    path = Path(args.out or Path(cfg.output_dir) / "tracking.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    cmp.save_csv(path)
    print(f"baseline mean {cmp.baseline_mean:.6g}, final mean {cmp.final_mean:.6g}, "
          f"ratio {cmp.ratio:.4g}")
    return EXIT_OK


COMMANDS = {"learn": cmd_learn, "simulate": cmd_simulate, "certify": cmd_certify,
            "heatmap": cmd_heatmap, "compare": cmd_compare}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
