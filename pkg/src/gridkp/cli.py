"""Command-line interface.

Subcommands: gen-data, train-detector, train-predictor, predict, eval,
ablate. Each reads an optional config file plus ``--set section.key=value``
overrides. Exit codes: 0 success, 2 usage, 3 config error, 4 missing
artifact, 5 incompatible checkpoints, 6 locked run directory, 1 internal
error. Failures print one ``gridkp: error: <category>: <message>`` line to
stderr.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_INCOMPATIBLE = 5
EXIT_LOCKED = 6


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridkp",
        description="Grid keypoint detection and stochastic video prediction.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None, help="config file (ini)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config entry")
        p.add_argument("--seed", type=int, default=None, help="override the seed")
        p.add_argument("--run-dir", type=str, default=None)
        p.add_argument("--data-root", type=str, default=None)

    common(sub.add_parser("gen-data", help="write a synthetic dataset"))
    for stage in ("train-detector", "train-predictor"):
        p = sub.add_parser(stage, help=f"run the {stage.split('-')[1]} training stage")
        common(p)
        p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    p = sub.add_parser("predict", help="roll out predictions for the test split")
    common(p)
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--out", type=str, default=None, help="prediction output directory")
    p = sub.add_parser("eval", help="score predictions against ground truth")
    common(p)
    p.add_argument("--pred-dir", type=str, default=None)
    common(sub.add_parser("ablate", help="run the ablation suite"))
    return parser


def _load_config(args):
    from gridkp.config import TrainConfig, apply_overrides, parse_config

    cfg = parse_config(args.config) if args.config else TrainConfig()
    if args.overrides:
        apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.run_dir is not None:
        cfg.run_dir = args.run_dir
    if args.data_root is not None:
        cfg.data_root = args.data_root
    cfg.validate()
    return cfg


def _cmd_gen_data(cfg) -> int:
    from gridkp import data as gdata

    scene = gdata.SyntheticSceneConfig(
        num_objects=cfg.data_num_objects, motion_kind=cfg.data_motion,
        image_size=cfg.image_size, object_radius=cfg.data_radius,
        seed=cfg.seed, noise_std=cfg.data_noise_std,
        switch_prob=cfg.data_switch_prob,
    )
    n = cfg.data_num_train + cfg.data_num_test
    frames, tracks = gdata.generate_synthetic(scene, n, cfg.data_frames)
    manifest = gdata.write_dataset(
        cfg.data_root, frames, tracks, cfg.data_num_train, cfg.t_obs, cfg.horizon
    )
    print(f"wrote {len(manifest.train_ids)} train / {len(manifest.test_ids)} test "
          f"sequences under {cfg.data_root}")
    return EXIT_OK


def _cmd_train(cfg, stage: str, resume: bool) -> int:
    from gridkp.harness import run_stage

    ckpt = run_stage(stage, cfg, resume=resume)
    print(f"checkpoint written: {ckpt}")
    return EXIT_OK


def _cmd_predict(cfg, samples: int, seed, out) -> int:
    from gridkp.harness import predict_from_run

    out_dir = predict_from_run(cfg, samples, cfg.seed if seed is None else seed, out)
    print(f"predictions written: {out_dir}")
    return EXIT_OK


def _cmd_eval(cfg, pred_dir) -> int:
    from gridkp.harness import evaluate_run

    per_frame, summary = evaluate_run(cfg, pred_dir)
    print(f"metrics written: {per_frame} {summary}")
    return EXIT_OK


def _cmd_ablate(cfg) -> int:
    from gridkp.harness import run_ablation_suite

    for path in run_ablation_suite(cfg):
        print(f"report written: {path}")
    return EXIT_OK


def _error(category: str, message: str, code: int) -> int:
    sys.stderr.write(f"gridkp: error: {category}: {message}\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from gridkp.harness import IncompatibleCheckpoint, MissingArtifact, RunLocked

    try:
        cfg = _load_config(args)
    except FileNotFoundError as e:
        return _error("config", str(e), EXIT_CONFIG)
    except ValueError as e:
        return _error("config", str(e), EXIT_CONFIG)

    try:
        if args.command == "gen-data":
            return _cmd_gen_data(cfg)
        if args.command == "train-detector":
            return _cmd_train(cfg, "detect", args.resume)
        if args.command == "train-predictor":
            return _cmd_train(cfg, "predict", args.resume)
        if args.command == "predict":
            return _cmd_predict(cfg, args.samples, args.seed, args.out)
        if args.command == "eval":
            return _cmd_eval(cfg, args.pred_dir)
        if args.command == "ablate":
            return _cmd_ablate(cfg)
        return _error("usage", f"unknown command {args.command}", EXIT_USAGE)
    except MissingArtifact as e:
        return _error("missing", str(e), EXIT_MISSING)
    except IncompatibleCheckpoint as e:
        return _error("incompatible", str(e), EXIT_INCOMPATIBLE)
    except RunLocked as e:
        return _error("locked", str(e), EXIT_LOCKED)
    except FileNotFoundError as e:
        return _error("missing", str(e), EXIT_MISSING)
    except ValueError as e:
        return _error("config", str(e), EXIT_CONFIG)
    except Exception as e:  # pragma: no cover - last-resort diagnostics
        return _error("internal", f"{type(e).__name__}: {e}", EXIT_INTERNAL)


if __name__ == "__main__":
    sys.exit(main())
