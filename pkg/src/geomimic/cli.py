"""Command-line interface: gen, train, eval and servo.

Every command takes an optional JSON config file plus flag overrides,
derives all randomness from one --seed, and embeds its effective config
in whatever artifact it writes so a run can be reproduced from its
output alone. Exit status is 0 exactly when the requested artifact was
fully written.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields

import numpy as np

from .geometry import KernelKind
from .metrics import evaluate, save_report, write_frame_csv
from .scene import (
    DemoConfig,
    PerturbationKind,
    PerturbationSetting,
    SceneError,
    apply_perturbation,
    demo_to_json_dict,
    gen_demo,
    load_demo,
    make_servo_world,
    save_demo,
)
from .servo import ServoConfig, ServoError, closed_loop
from .training import TrainConfig, TrainingError, load_trained, save_trained, train, write_loss_csv


class CliError(Exception):
    """User-facing command failure."""


def _read_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except FileNotFoundError as exc:
        raise CliError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise CliError(f"config file {path} must hold a JSON object")
    return payload


def _merged_config(cls, file_payload: dict, overrides: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(file_payload) - known
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}")
    merged = dict(file_payload)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**merged)
    except (SceneError, TrainingError, ServoError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}") from exc


def _cmd_gen(args: argparse.Namespace) -> int:
    overrides = {
        "seed": args.seed,
        "kernel_kind": args.kernel,
        "n_frames": args.n_frames,
        "n_distractors": args.n_distractors,
        "noise_px": args.noise_px,
        "layout_seed": args.layout_seed,
    }
    config = _merged_config(DemoConfig, _read_config_file(args.config), overrides)
    demo = gen_demo(config)
    if args.perturb is not None:
        setting = PerturbationSetting(PerturbationKind(args.perturb), args.magnitude)
        demo = apply_perturbation(demo, setting, seed=config.seed)
    save_demo(demo, args.out)
    n_feats = len(demo.frames[0])
    print(
        f"wrote {args.out}: {demo.n_frames} frames, {n_feats} features, "
        f"kind={demo.kernel_kind.value}, ground_truth={list(demo.ground_truth)}"
    )
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    overrides = {
        "seed": args.seed,
        "alpha_gcr": args.alpha_gcr,
        "alpha_rsw": args.alpha_rsw,
        "lr": args.lr,
        "epochs": args.epochs,
        "hidden": args.hidden,
    }
    config = _merged_config(TrainConfig, _read_config_file(args.config), overrides)
    try:
        demo = load_demo(args.demo)
    except FileNotFoundError as exc:
        raise CliError(f"demo file not found: {args.demo}") from exc
    kind = KernelKind(args.kernel) if args.kernel else demo.kernel_kind
    trained = train(demo, kind, config)
    save_trained(trained, args.out)
    if args.loss_csv:
        write_loss_csv(trained, args.loss_csv)
    first, last = trained.loss_trace[0, 1], trained.loss_trace[-1, 1]
    print(f"wrote {args.out}: loss {first:.4f} -> {last:.4f} over {config.epochs} epochs")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    try:
        demo = load_demo(args.demo)
    except FileNotFoundError as exc:
        raise CliError(f"demo file not found: {args.demo}") from exc
    try:
        trained = load_trained(args.model)
    except FileNotFoundError as exc:
        raise CliError(f"model file not found: {args.model}") from exc
    report = evaluate(demo, trained)
    echo = {
        "demo": args.demo,
        "model": args.model,
        "train_config": trained.config.to_json_dict(),
    }
    save_report(report, args.out, config_echo=echo)
    if args.csv:
        write_frame_csv(report, args.csv, config_echo=echo)
    con = "n/a" if report.con_acc is None else f"{report.con_acc:.3f}"
    print(f"wrote {args.out}: acc={report.acc:.1f}% con_acc={con}")
    return 0


def _cmd_servo(args: argparse.Namespace) -> int:
    overrides = {
        "mode": args.mode,
        "gain": args.gain,
        "tol": args.tol,
        "max_steps": args.max_steps,
        "damping": args.damping,
    }
    config = _merged_config(ServoConfig, _read_config_file(args.config), overrides)
    seed = args.seed if args.seed is not None else 0
    trained = None
    association = None
    if args.model:
        try:
            trained = load_trained(args.model)
        except FileNotFoundError as exc:
            raise CliError(f"model file not found: {args.model}") from exc
        kind = trained.kernel_kind
    else:
        kind = KernelKind(args.kernel or "p2p")
    world = make_servo_world(kind=kind, seed=seed, start_error_px=args.start_error_px)
    if trained is None:
        association = world.ground_truth
    try:
        traj = closed_loop(world, trained, config, association=association)
    except ServoError as exc:
        raise CliError(f"servo loop failed: {exc}") from exc
    echo = {"servo": config.to_json_dict(), "seed": seed, "kernel": kind.value}
    traj.to_csv(args.out, config_echo=echo)
    state = "converged" if traj.converged else "not converged"
    final = traj.error_norms[-1] if traj.error_norms else float("nan")
    print(f"wrote {args.out}: {traj.n_steps} steps, {state}, final error norm {final:.4g}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geomimic",
        description="Learn geometric feature-association tasks from a demonstration.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic demonstration")
    gen.add_argument("--config", help="JSON file with demo config fields")
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--out", required=True, help="output demo JSON path")
    gen.add_argument("--kernel", choices=[k.value for k in KernelKind], default=None)
    gen.add_argument("--n-frames", type=int, default=None, dest="n_frames")
    gen.add_argument("--n-distractors", type=int, default=None, dest="n_distractors")
    gen.add_argument("--noise-px", type=float, default=None, dest="noise_px")
    gen.add_argument("--layout-seed", type=int, default=None, dest="layout_seed")
    gen.add_argument(
        "--perturb", choices=[k.value for k in PerturbationKind], default=None
    )
    gen.add_argument("--magnitude", type=float, default=1.0)
    gen.set_defaults(func=_cmd_gen)

    tr = sub.add_parser("train", help="fit a kernel scorer on a demo")
    tr.add_argument("--demo", required=True)
    tr.add_argument("--config", help="JSON file with train config fields")
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--out", required=True, help="output model JSON path")
    tr.add_argument("--kernel", choices=[k.value for k in KernelKind], default=None)
    tr.add_argument("--alpha-gcr", type=float, default=None, dest="alpha_gcr")
    tr.add_argument("--alpha-rsw", type=float, default=None, dest="alpha_rsw")
    tr.add_argument("--lr", type=float, default=None)
    tr.add_argument("--epochs", type=int, default=None)
    tr.add_argument("--hidden", type=int, default=None)
    tr.add_argument("--loss-csv", default=None, dest="loss_csv")
    tr.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="score a trained kernel on a demo")
    ev.add_argument("--demo", required=True)
    ev.add_argument("--model", required=True)
    ev.add_argument("--out", required=True, help="output report JSON path")
    ev.add_argument("--csv", default=None, help="optional per-frame CSV path")
    ev.set_defaults(func=_cmd_eval)

    sv = sub.add_parser("servo", help="run the closed control loop in simulation")
    sv.add_argument("--config", help="JSON file with servo config fields")
    sv.add_argument("--seed", type=int, default=None)
    sv.add_argument("--out", required=True, help="output trajectory CSV path")
    sv.add_argument("--model", default=None, help="trained kernel JSON; omit for ground truth")
    sv.add_argument("--kernel", choices=[k.value for k in KernelKind], default=None)
    sv.add_argument("--mode", choices=["ibvs", "uvs"], default=None)
    sv.add_argument("--gain", type=float, default=None)
    sv.add_argument("--tol", type=float, default=None)
    sv.add_argument("--max-steps", type=int, default=None, dest="max_steps")
    sv.add_argument("--damping", type=float, default=None)
    sv.add_argument("--start-error-px", type=float, default=60.0, dest="start_error_px")
    sv.set_defaults(func=_cmd_servo)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SceneError, TrainingError, ServoError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
