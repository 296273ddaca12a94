"""Command-line surface: synth, train-teacher, train-student, eval,
gradcheck, sweep-support.

Exit codes: 0 success, 1 validation/config error, 2 numeric failure,
3 I/O or format error.  LCR2S_THREADS caps intra-step BLAS parallelism
(default 1 so seeded runs are bit-reproducible).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2
EXIT_IO = 3


def _set_thread_env() -> None:
    n = os.environ.get("LCR2S_THREADS", "1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, n)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lcr2s",
        description="Teacher-student cross-modal identity matching lab")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None,
                        help="JSON config file (defaults apply otherwise)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VAL",
                        help="dot-path config override, repeatable")
    common.add_argument("--seed", type=int, default=None,
                        help="override data and training seeds")
    common.add_argument("--out", type=Path, default=Path("out"),
                        help="output directory")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common],
                   help="generate a synthetic dataset feature file")

    p = sub.add_parser("train-teacher", parents=[common],
                       help="train the fusion teacher")
    p.add_argument("--data", type=Path, default=None,
                   help="feature file (synthesized from config if omitted)")
    p.add_argument("--fusion", choices=("mhaf", "mean", "cross-attention"),
                   default=None)
    p.add_argument("--mhaf-shared", choices=("true", "false"), default=None)

    p = sub.add_parser("train-student", parents=[common],
                       help="distill into the single-input student")
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--teacher-ckpt", type=Path, default=None)
    p.add_argument("--kd-mode", default=None,
                   choices=("baseline", "t", "i", "r", "tr", "ir", "ti", "tir"))

    p = sub.add_parser("eval", parents=[common],
                       help="retrieval metrics for a student checkpoint")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, default=None)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference checks on all gradients")
    p.add_argument("--targets", default=None,
                   help="comma-separated subset of targets")
    p.add_argument("--instances", type=int, default=3)
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)

    p = sub.add_parser("sweep-support", parents=[common],
                       help="train/eval across support-set sizes")
    p.add_argument("--kt-list", default="0,1,2")
    p.add_argument("--kv-list", default="1")
    p.add_argument("--seeds", default="0")
    return parser


def _load_cfg(args):
    from .config import load_config
    overrides = list(args.set)
    if args.seed is not None:
        overrides += [f"data.seed={args.seed}", f"training.seed={args.seed}"]
    return load_config(args.config, overrides)


def _eval_dataset(cfg: dict, path):
    from . import data as datamod
    from .config import synthetic_config
    if path is not None:
        return datamod.load_features(path)
    syn = synthetic_config(cfg)
    return datamod.generate_synthetic(
        replace(syn, view_seed=cfg["eval"]["view_seed"]))


def _train_dataset(cfg: dict, path):
    from . import data as datamod
    from .config import synthetic_config
    if path is not None:
        return datamod.load_features(path)
    return datamod.generate_synthetic(synthetic_config(cfg))


def _write_outputs(out: Path, cfg: dict, name: str, ckpt, trace) -> None:
    from .config import config_hash
    from .training import save_checkpoint
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out / f"{name}.ckpt")
    with open(out / f"{name}_trace.csv", "w", newline="") as fh:
        fh.write(f"# config {config_hash(cfg)} seed {cfg['training']['seed']}\n")
        writer = csv.DictWriter(fh, fieldnames=["epoch", "mean_loss", "lr"])
        writer.writeheader()
        writer.writerows(trace)
    with open(out / "config.json", "w") as fh:
        json.dump({"config_hash": config_hash(cfg), **cfg}, fh, indent=2)
        fh.write("\n")


def _cmd_synth(args) -> int:
    from . import data as datamod
    from .config import synthetic_config
    cfg = _load_cfg(args)
    ds = datamod.generate_synthetic(synthetic_config(cfg))
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "features.lcrf"
    datamod.save_features(ds, path)
    print(f"wrote {path}: {len(ds.instances)} instances, "
          f"{ds.n_pairs} pairs, input_dim {ds.input_dim}")
    return EXIT_OK


def _cmd_train_teacher(args) -> int:
    from .config import train_config
    from .training import train_teacher
    cfg = _load_cfg(args)
    if args.fusion is not None:
        cfg["mhaf"]["fusion"] = args.fusion
    if args.mhaf_shared is not None:
        cfg["mhaf"]["shared"] = args.mhaf_shared == "true"
    ds = _train_dataset(cfg, args.data)
    ckpt, trace = train_teacher(ds, train_config(cfg, "teacher"))
    _write_outputs(args.out, cfg, "teacher", ckpt, trace)
    print(f"teacher trained: final mean loss {trace[-1]['mean_loss']:.4f}")
    return EXIT_OK


def _cmd_train_student(args) -> int:
    from .config import train_config
    from .training import load_checkpoint, train_student
    cfg = _load_cfg(args)
    if args.kd_mode is not None:
        cfg["training"]["kd_mode"] = args.kd_mode
    teacher_ckpt = None
    if cfg["training"]["kd_mode"] != "baseline":
        if args.teacher_ckpt is None:
            print("error: --teacher-ckpt is required unless "
                  "--kd-mode baseline", file=sys.stderr)
            return EXIT_CONFIG
        teacher_ckpt = load_checkpoint(args.teacher_ckpt)
    ds = _train_dataset(cfg, args.data)
    ckpt, trace = train_student(ds, teacher_ckpt, train_config(cfg, "student"))
    _write_outputs(args.out, cfg, "student", ckpt, trace)
    print(f"student trained: final mean loss {trace[-1]['mean_loss']:.4f}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .config import config_hash
    from .metrics import evaluate
    from .training import load_checkpoint, student_from_checkpoint
    cfg = _load_cfg(args)
    ckpt = load_checkpoint(args.ckpt)
    model = student_from_checkpoint(ckpt)
    ds = _eval_dataset(cfg, args.data)
    if model.visual.input_dim != ds.input_dim:
        print(f"error: checkpoint input_dim {model.visual.input_dim} != "
              f"dataset input_dim {ds.input_dim}", file=sys.stderr)
        return EXIT_CONFIG
    report = evaluate(model.visual, model.textual, ds,
                      stage=cfg["eval"]["feature_stage"])
    print(report.to_text(), end="")
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "metrics.json", "w") as fh:
        json.dump({"config_hash": config_hash(cfg),
                   "seed": cfg["training"]["seed"], **report.to_dict()},
                  fh, indent=2)
        fh.write("\n")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .gradcheck import TARGETS, TOLERANCE, run
    cfg = _load_cfg(args)
    targets = TARGETS if args.targets is None \
        else tuple(t.strip() for t in args.targets.split(","))
    results = run(targets, instances=args.instances,
                  seed=cfg["training"]["seed"], corrupt=args.corrupt)
    failed = False
    for target, err in results.items():
        status = "pass" if err < TOLERANCE else "FAIL"
        if err >= TOLERANCE:
            failed = True
        print(f"{target:<12} max_rel_err {err:.3e}  {status}")
    return EXIT_NUMERIC if failed else EXIT_OK


def _cmd_sweep_support(args) -> int:
    from .config import config_hash, train_config
    from .metrics import evaluate
    from .training import student_from_checkpoint, train_student, train_teacher
    cfg = _load_cfg(args)
    kt_list = [int(x) for x in args.kt_list.split(",")]
    kv_list = [int(x) for x in args.kv_list.split(",")]
    seeds = [int(x) for x in args.seeds.split(",")]

    rows = []
    for kt in kt_list:
        for kv in kv_list:
            for seed in seeds:
                cell = json.loads(json.dumps(cfg))  # deep copy
                cell["training"]["K_t"] = kt
                cell["training"]["K_v"] = kv
                cell["training"]["seed"] = seed
                cell["data"]["seed"] = seed
                ds = _train_dataset(cell, None)
                # fresh views of the cell's own identity population
                ds_eval = _eval_dataset(cell, None)
                t_ckpt, _ = train_teacher(ds, train_config(cell, "teacher"))
                s_ckpt, _ = train_student(ds, t_ckpt,
                                          train_config(cell, "student"))
                model = student_from_checkpoint(s_ckpt)
                report = evaluate(model.visual, model.textual, ds_eval,
                                  stage=cell["eval"]["feature_stage"])
                rows.append({"K_t": kt, "K_v": kv, "seed": seed,
                             "rank1": report.rank1, "rank5": report.rank5,
                             "map": report.map})
                print(f"K_t={kt} K_v={kv} seed={seed} "
                      f"rank1={report.rank1:.4f} map={report.map:.4f}")
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "sweep.csv", "w", newline="") as fh:
        fh.write(f"# config {config_hash(cfg)}\n")
        writer = csv.DictWriter(
            fh, fieldnames=["K_t", "K_v", "seed", "rank1", "rank5", "map"])
        writer.writeheader()
        writer.writerows(rows)
    return EXIT_OK


_COMMANDS = {
    "synth": _cmd_synth,
    "train-teacher": _cmd_train_teacher,
    "train-student": _cmd_train_student,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "sweep-support": _cmd_sweep_support,
}


def main(argv=None) -> int:
    _set_thread_env()
    args = _build_parser().parse_args(argv)

    from .config import ConfigError
    from .data import FeatureFormatError, SamplingError, SupportSetError
    from .training import (CheckpointFormatError, ConfigMismatchError,
                           NonFiniteLossError)
    try:
        return _COMMANDS[args.command](args)
    except (FeatureFormatError, CheckpointFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NonFiniteLossError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ConfigMismatchError, SamplingError, SupportSetError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
