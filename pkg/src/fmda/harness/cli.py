"""Command-line interface.

Every subcommand accepts ``--config <file>`` plus repeatable ``--set
key=value`` overrides and a ``--seed`` shortcut. Exit codes: 0 success,
2 configuration error, 3 data/format error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from ..dynamics import IntegrationBlowupError, generate_dataset, make_background
from ..errors import ConfigError, FormatError, NumericalError
from ..flow import load_checkpoint, save_checkpoint
from ..grid import rmse_per_variable
from ..obs import read_observations_csv, sample_observations
from ..train import train_stage1, train_stage2
from . import experiments, report
from .config import ExperimentConfig, emit_config_template, load_experiment_config
from .trajio import load_trajectory, save_trajectory

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="experiment config file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key (repeatable)",
    )
    parser.add_argument("--seed", type=int, help="override the master seed")


def _load_config(args) -> ExperimentConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_experiment_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fmda",
        description="Flow-matching data assimilation twin experiments on toy dynamics",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("config-template", help="write a fully commented default config")
    p.add_argument("--out", default="fmda.cfg", help="output path")

    p = sub.add_parser("gen-data", help="generate and save a truth trajectory")
    _add_common(p)
    p.add_argument("--out", help="trajectory path (default: data.path)")

    p = sub.add_parser("train-stage1", help="train the single-step assimilation model")
    _add_common(p)
    p.add_argument("--data", help="training trajectory (default: data.path)")
    p.add_argument("--out", help="checkpoint path (default: checkpoint)")

    p = sub.add_parser("train-stage2", help="fine-tune a stage-I checkpoint for cycling")
    _add_common(p)
    p.add_argument("--data", help="training trajectory (default: data.path)")
    p.add_argument("--init", help="stage-I checkpoint (default: checkpoint)")
    p.add_argument("--out", help="stage-II checkpoint path (default: checkpoint2)")

    p = sub.add_parser("assimilate", help="run one assimilation at a trajectory time")
    _add_common(p)
    p.add_argument("--trajectory", help="truth trajectory (default: data.path)")
    p.add_argument("--time-index", type=int, required=True, help="analysis time index")
    p.add_argument("--obs", help="observation CSV (default: synthetic at the first eval rate)")
    p.add_argument("--out", help="write the analysis as a single-state trajectory file")

    for name, help_text in (
        ("single-step", "single-step assimilation over held-out times"),
        ("noise-sweep", "single-step assimilation across the noise grid"),
        ("cycle", "long-horizon cycling assimilation"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        p.add_argument("--out-dir", help="report directory (default: out.dir)")

    p = sub.add_parser("report", help="re-aggregate a records CSV into summary and figures")
    _add_common(p)
    p.add_argument("--records", required=True, help="records CSV path")
    p.add_argument("--out-dir", help="report directory (default: out.dir)")

    return parser


def _cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = args.out or cfg.data_path
    traj = generate_dataset(cfg.dynamics, cfg.data_spinup, cfg.data_length, cfg.seed)
    save_trajectory(traj, out)
    print(f"wrote {len(traj)} states to {out}")
    return EXIT_OK


def _cmd_train_stage1(args) -> int:
    cfg = _load_config(args)
    traj = load_trajectory(args.data or cfg.data_path)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, losses = train_stage1(
        traj, cfg.arch, cfg.train, cfg.seed, log_path=out_dir / "train_log.csv"
    )
    out = args.out or cfg.checkpoint
    save_checkpoint(model, out)
    tail = float(np.mean(losses[-100:])) if losses else float("nan")
    print(f"stage 1: {len(losses)} iterations, tail loss {tail:.5f}, saved {out}")
    return EXIT_OK


def _cmd_train_stage2(args) -> int:
    cfg = _load_config(args)
    init = args.init or cfg.checkpoint
    if not Path(init).exists():
        raise FormatError(
            f"stage 2 warm-starts from a stage-I checkpoint, but {init} does not exist"
        )
    model = load_checkpoint(init)
    traj = load_trajectory(args.data or cfg.data_path)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, losses = train_stage2(
        model, traj, cfg.train, cfg.seed, cfg.flow, log_path=out_dir / "train_log.csv"
    )
    out = args.out or cfg.checkpoint2
    save_checkpoint(model, out)
    tail = float(np.mean(losses[-50:])) if losses else float("nan")
    print(f"stage 2: {len(losses)} iterations, tail loss {tail:.5f}, saved {out}")
    return EXIT_OK


def _cmd_assimilate(args) -> int:
    cfg = _load_config(args)
    traj = load_trajectory(args.trajectory or cfg.data_path)
    t = args.time_index
    if not 0 <= t < len(traj):
        raise ConfigError(f"--time-index {t} outside trajectory of length {len(traj)}")
    truth = traj[t]
    stats = traj.climatology()
    background = make_background(
        traj, t, cfg.train.lead, cfg.train.sigma_ic, np.random.default_rng([cfg.seed, 90])
    )
    if args.obs:
        observations = read_observations_csv(
            args.obs, truth.H, truth.W, truth.variable_names
        )
    else:
        observations = sample_observations(
            truth, cfg.alphas[0], np.random.default_rng([cfg.seed, 91])
        )
    assim = experiments.build_assimilator(cfg, 0.0, stats)
    analysis = assim(background, observations)
    for v, name in enumerate(truth.variable_names):
        rb = rmse_per_variable(background, truth)[v]
        ra = rmse_per_variable(analysis, truth)[v]
        print(f"{name}: background RMSE {rb:.6f} -> analysis RMSE {ra:.6f}")
    if args.out:
        from ..dynamics import Trajectory

        save_trajectory(Trajectory((analysis,), traj.config, cfg.seed), args.out)
        print(f"wrote analysis to {args.out}")
    return EXIT_OK


def _run_and_report(args, runner, name: str) -> int:
    cfg = _load_config(args)
    records = runner(cfg)
    out_dir = args.out_dir or cfg.out_dir
    paths = report.write_report(records, out_dir, name, figures=cfg.figures)
    print(f"{name}: {len(records)} records -> {paths['csv']}")
    for fig in paths["figures"]:
        print(f"figure: {fig}")
    return EXIT_OK


def _cmd_report(args) -> int:
    cfg = _load_config(args)
    records = report.read_records_csv(args.records)
    name = records[0].experiment if records else "report"
    out_dir = args.out_dir or cfg.out_dir
    paths = report.write_report(records, out_dir, name, figures=cfg.figures)
    print(f"report: {len(records)} records -> {paths['summary']}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "config-template":
            emit_config_template(args.out)
            print(f"wrote {args.out}")
            return EXIT_OK
        if args.command == "gen-data":
            return _cmd_gen_data(args)
        if args.command == "train-stage1":
            return _cmd_train_stage1(args)
        if args.command == "train-stage2":
            return _cmd_train_stage2(args)
        if args.command == "assimilate":
            return _cmd_assimilate(args)
        if args.command == "single-step":
            return _run_and_report(args, experiments.run_single_step, "single_step")
        if args.command == "noise-sweep":
            return _run_and_report(args, experiments.run_noise_sweep, "noise_sweep")
        if args.command == "cycle":
            return _run_and_report(args, experiments.run_cycling, "cycle")
        if args.command == "report":
            return _cmd_report(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, IntegrationBlowupError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
