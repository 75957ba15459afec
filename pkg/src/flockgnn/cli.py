"""Command-line experiment driver.

Subcommands:
    gen-data        generate an imitation dataset under the centralized
                    controller
    train           offline training, emits a checkpoint and loss curves
    eval            metric table over controller variants on the test split
    online          single closed-loop run with online retraining
    sweep           metric ratios across radius / initial speed / swarm size
    verify-theorem  tracking-bound verification on synthetic problems

All outputs land under --out. Every command is seed-deterministic and
writes a manifest sufficient to re-run it bit-identically. Exit codes:
0 success, 1 usage error, 2 numeric failure or bound violation.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import flocking, online, training
from .flocking import FlockingConfig
from .model import load_checkpoint, save_checkpoint
from .online import OnlineConfig, make_rotating_problem, verify_tracking_bound
from .training import Dataset, TrainConfig

DESK = {
    "n_agents": 25,
    "n_train": 40,
    "n_val": 8,
    "n_test": 8,
    "epochs": 10,
    "batch_size": 2,
    "realizations": 3,
    # short-schedule step sizes; paper scale restores the published value
    "lr": 1e-2,
    "wide_lr": 5e-4,
}

PAPER = {
    "n_agents": 50,
    "n_train": 400,
    "n_val": 40,
    "n_test": 40,
    "epochs": 30,
    "batch_size": 20,
    "realizations": 5,
    "lr": 5e-4,
    "wide_lr": None,
}

DEFAULTS = {
    "comm_radius": 2.0,
    "init_speed": 3.0,
    "duration": 2.0,
    "dt": 0.01,
    "potential_cutoff": 1.0,
    "min_spacing": 0.1,
    "max_accel": 10.0,
    "wide_order": 3,
    "deep_order": 3,
    "width": 32,
    "nonlinearity": "tanh",
    "lr": 5e-4,
    "beta1": 0.9,
    "beta2": 0.999,
    "clip_norm": 10.0,
    "online_lr": 0.3,
    "online_steps": 1,
    "online_clip": 0.1,
    "seed": 0,
}
DEFAULTS.update(DESK)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_identifier():
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, cwd=Path(__file__).parent,
            timeout=5,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "flockgnn-0.1.0"


def resolve_config(args):
    """Defaults <- optional --paper-scale <- config file <- CLI flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "paper_scale", False):
        cfg.update(PAPER)
    if getattr(args, "config", None):
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def flocking_config(cfg, **overrides):
    base = dict(
        n_agents=cfg["n_agents"],
        comm_radius=cfg["comm_radius"],
        init_speed=cfg["init_speed"],
        duration=cfg["duration"],
        dt=cfg["dt"],
        potential_cutoff=cfg["potential_cutoff"],
        min_spacing=cfg["min_spacing"],
        max_accel=cfg["max_accel"],
        seed=cfg["seed"],
    )
    base.update(overrides)
    return FlockingConfig(**base)


def train_config(cfg, arch, seed):
    return TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        lr=cfg["lr"],
        beta1=cfg["beta1"],
        beta2=cfg["beta2"],
        clip_norm=cfg["clip_norm"],
        wide_lr=cfg["wide_lr"],
        wide_order=cfg["wide_order"],
        deep_order=cfg["deep_order"],
        widths=[cfg["width"]],
        nonlinearity=cfg["nonlinearity"],
        arch=arch,
        seed=seed,
    )


def write_manifest(out_dir, command, cfg, extra=None):
    manifest = {
        "command": command,
        "build": build_identifier(),
        "config": cfg,
    }
    if extra:
        manifest.update(extra)
    with open(Path(out_dir) / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def cmd_gen_data(args):
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fcfg = flocking_config(cfg)
    dataset = training.generate_dataset(
        fcfg, cfg["n_train"], cfg["n_val"], cfg["n_test"], cfg["seed"])
    for traj in (dataset.train + dataset.validation + dataset.test):
        if not flocking.check_dynamics_consistency(traj):
            print("generated trajectory failed re-integration", file=sys.stderr)
            return 2
    training.save_dataset(out, dataset)
    print(f"wrote {cfg['n_train']}/{cfg['n_val']}/{cfg['n_test']} "
          f"trajectories to {out}")
    return 0


def cmd_train(args):
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = training.load_dataset(args.dataset)
    tcfg = train_config(cfg, args.arch, cfg["seed"])
    params, history = training.train(
        dataset, tcfg,
        progress=lambda row: print(
            f"epoch {row['epoch']:3d}  loss {row['train_loss']:.6g}  "
            f"val {row['val_metric']:.6g}"))
    save_checkpoint(out / "checkpoint.json", params)
    with open(out / "loss_curve.csv", "w") as fh:
        fh.write("epoch,train_loss,val_metric\n")
        for row in history:
            fh.write("%d,%r,%r\n" % (row["epoch"], row["train_loss"],
                                     row["val_metric"]))
    write_manifest(out, "train", cfg, {
        "arch": args.arch,
        "dataset": str(args.dataset),
        "best_val_metric": min((r["val_metric"] for r in history
                                if np.isfinite(r["val_metric"])),
                               default=float("nan")),
    })
    return 0


def _rollout_metrics(make_traj, initial_states):
    totals, finals = [], []
    for st in initial_states:
        traj = make_traj(st)
        totals.append(flocking.velocity_variation_total(traj))
        finals.append(flocking.velocity_variation_final(traj))
    return totals, finals


def evaluate_variants(dataset: Dataset, checkpoints, online_lr,
                      online_steps, online_clip=0.1, online_modes=True):
    """Metric rows for the controller variants on the test split.

    checkpoints maps row labels to parameter sets; the optimal controller
    row is always included, online rows only for the 'widedeep' entry.
    """
    fcfg = dataset.config
    initial = [traj.states[0] for traj in dataset.test]
    rows = {}

    rows["optimal"] = _rollout_metrics(
        lambda st: flocking.rollout_optimal(st, fcfg), initial)

    for label, params in checkpoints.items():
        rows[label] = _rollout_metrics(
            lambda st, p=params: training.rollout_model(p, st, fcfg),
            initial)
        if label == "widedeep" and online_modes:
            for mode in (online.CENTRALIZED, online.DECENTRALIZED):
                ocfg = OnlineConfig(lr=online_lr, steps=online_steps,
                                    mode=mode, clip_norm=online_clip)
                totals, finals = [], []
                for st in initial:
                    res = online.run_online_phase(params, st, fcfg, ocfg)
                    totals.append(res.variation_total)
                    finals.append(res.variation_final)
                rows[f"widedeep_online_{mode}"] = (totals, finals)
    return rows


def metrics_table(rows):
    table = []
    for label, (totals, finals) in rows.items():
        table.append({
            "architecture": label,
            "total_mean": float(np.mean(totals)),
            "total_std": float(np.std(totals)),
            "final_mean": float(np.mean(finals)),
            "final_std": float(np.std(finals)),
        })
    return table


def cmd_eval(args):
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = training.load_dataset(args.dataset)
    checkpoints = {}
    for label, path in (("widedeep", args.widedeep), ("deep_only", args.gnn),
                        ("wide_only", args.filter)):
        if path:
            checkpoints[label] = load_checkpoint(path)
    if not checkpoints:
        raise UsageError("need at least one checkpoint to evaluate")
    rows = evaluate_variants(dataset, checkpoints, cfg["online_lr"],
                             cfg["online_steps"], cfg["online_clip"],
                             online_modes=not args.no_online)
    table = metrics_table(rows)
    with open(out / "metrics.csv", "w") as fh:
        fh.write("architecture,total_mean,total_std,final_mean,final_std\n")
        for row in table:
            fh.write("%s,%r,%r,%r,%r\n" % (
                row["architecture"], row["total_mean"], row["total_std"],
                row["final_mean"], row["final_std"]))
    write_manifest(out, "eval", cfg, {"table": table,
                                      "dataset": str(args.dataset)})
    for row in table:
        print(f"{row['architecture']:30s} total {row['total_mean']:10.4g} "
              f"(+-{row['total_std']:.3g})  final {row['final_mean']:10.4g} "
              f"(+-{row['final_std']:.3g})")
    return 0


def cmd_online(args):
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = load_checkpoint(args.checkpoint)
    fcfg = flocking_config(cfg)
    rng = np.random.default_rng(cfg["seed"])
    state0 = flocking.initial_state(rng, fcfg)
    ocfg = OnlineConfig(lr=cfg["online_lr"], steps=cfg["online_steps"],
                        mode=args.mode, clip_norm=cfg["online_clip"])
    res = online.run_online_phase(params, state0, fcfg, ocfg)
    with open(out / "steps.csv", "w") as fh:
        fh.write("t,loss,taps_norm,disagreement,velocity_variation\n")
        for row in res.rows:
            fh.write("%d,%r,%r,%r,%r\n" % (
                row["t"], row["loss"], row["taps_norm"],
                row["disagreement"], row["velocity_variation"]))
    summary = {
        "mode": args.mode,
        "seed": cfg["seed"],
        "config": cfg,
        "variation_total": res.variation_total,
        "variation_final": res.variation_final,
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(f"total variation {res.variation_total:.6g}, "
          f"final {res.variation_final:.6g}")
    return 0


SWEEP_AXES = {"radius": "comm_radius", "velocity": "init_speed",
              "agents": "n_agents"}


def sweep_point(cfg, axis_key, value, params_by_label, rollouts, seed):
    fcfg = flocking_config(cfg, **{axis_key: value})
    children = np.random.SeedSequence(seed).spawn(rollouts)
    initial = [flocking.initial_state(np.random.default_rng(c), fcfg)
               for c in children]
    opt_totals, _ = _rollout_metrics(
        lambda st: flocking.rollout_optimal(st, fcfg), initial)
    opt_mean = float(np.mean(opt_totals))
    point = {"value": value, "optimal_total": opt_mean}
    for label, params in params_by_label.items():
        totals, _ = _rollout_metrics(
            lambda st, p=params: training.rollout_model(p, st, fcfg),
            initial)
        point[label] = float(np.mean(totals)) / opt_mean
    return point


def cmd_sweep(args):
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    values = [float(v) for v in args.values.split(",") if v]
    if not values:
        raise UsageError("empty sweep value list")
    axis_key = SWEEP_AXES[args.axis]
    if args.axis == "agents":
        values = [int(v) for v in values]
    params_by_label = {}
    for label, path in (("widedeep", args.widedeep), ("deep_only", args.gnn)):
        if path:
            params_by_label[label] = load_checkpoint(path)
    points = [sweep_point(cfg, axis_key, v, params_by_label,
                          args.rollouts, cfg["seed"]) for v in values]
    labels = list(params_by_label)
    with open(out / "sweep.csv", "w") as fh:
        fh.write("value,optimal_total," + ",".join(
            f"{l}_relative" for l in labels) + "\n")
        for pt in points:
            fh.write("%r,%r," % (pt["value"], pt["optimal_total"])
                     + ",".join("%r" % pt[l] for l in labels) + "\n")
    write_manifest(out, "sweep", cfg, {"axis": args.axis, "points": points})
    for pt in points:
        print(pt)
    return 0


def cmd_verify_theorem(args):
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    master = np.random.SeedSequence(cfg["seed"])
    reports = []
    worst_margin = np.inf
    for i, child in enumerate(master.spawn(args.problems)):
        rng = np.random.default_rng(child)
        dim = int(rng.integers(1, 9))
        curv_min = float(rng.uniform(0.5, 2.0))
        curv_max = curv_min + float(rng.uniform(0.5, 4.0))
        drift = float(rng.uniform(0.0, 0.2))
        gamma = 1.0 / curv_max
        problem = make_rotating_problem(rng, dim, args.steps, curv_min,
                                        curv_max, drift)
        rep = verify_tracking_bound(problem, gamma)
        margin = float(np.min(rep.bounds + rep.slack - rep.errors))
        worst_margin = min(worst_margin, margin)
        reports.append({
            "problem": i, "dim": dim, "drift": drift,
            "rate_max": rep.rate_max,
            "violations": rep.violations,
            "final_error": rep.final_error,
            "final_bound": float(rep.bounds[-1]),
        })
    total_violations = sum(r["violations"] for r in reports)
    result = {
        "problems": len(reports),
        "steps": args.steps,
        "violations": total_violations,
        "worst_margin": worst_margin,
        "reports": reports,
    }
    with open(out / "bound_report.json", "w") as fh:
        json.dump(result, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(f"{len(reports)} problems, {total_violations} bound violations")
    return 0 if total_violations == 0 else 2


def _add_common(sub):
    sub.add_argument("--out", required=True, help="run output directory")
    sub.add_argument("--config", help="JSON config file")
    sub.add_argument("--paper-scale", action="store_true",
                     help="full-scale settings instead of desk-scale")
    sub.add_argument("--seed", type=int)
    for key, typ in (("n_agents", int), ("comm_radius", float),
                     ("init_speed", float), ("epochs", int),
                     ("batch_size", int), ("lr", float),
                     ("online_lr", float), ("online_steps", int),
                     ("online_clip", float),
                     ("n_train", int), ("n_val", int), ("n_test", int)):
        sub.add_argument("--" + key.replace("_", "-"), dest=key, type=typ)


def build_parser():
    parser = _Parser(prog="flockgnn")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data")
    _add_common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = subs.add_parser("train")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--arch", default=training.ARCH_WIDE_DEEP,
                   choices=[training.ARCH_WIDE_DEEP,
                            training.ARCH_DEEP_ONLY,
                            training.ARCH_WIDE_ONLY])
    p.set_defaults(fn=cmd_train)

    p = subs.add_parser("eval")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--widedeep", help="combined-model checkpoint")
    p.add_argument("--gnn", help="deep-only checkpoint")
    p.add_argument("--filter", help="wide-only checkpoint")
    p.add_argument("--no-online", action="store_true",
                   help="skip the online retraining rows")
    p.set_defaults(fn=cmd_eval)

    p = subs.add_parser("online")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", default=online.CENTRALIZED,
                   choices=[online.CENTRALIZED, online.DECENTRALIZED])
    p.set_defaults(fn=cmd_online)

    p = subs.add_parser("sweep")
    _add_common(p)
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", required=True,
                   help="comma-separated axis values")
    p.add_argument("--widedeep", help="combined-model checkpoint")
    p.add_argument("--gnn", help="deep-only checkpoint")
    p.add_argument("--rollouts", type=int, default=10)
    p.set_defaults(fn=cmd_sweep)

    p = subs.add_parser("verify-theorem")
    _add_common(p)
    p.add_argument("--problems", type=int, default=50)
    p.add_argument("--steps", type=int, default=1000)
    p.set_defaults(fn=cmd_verify_theorem)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (FloatingPointError, training.TrainingDiverged) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
