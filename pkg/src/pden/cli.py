"""Command-line entry points.

Subcommands::

    pden train     --config cfg.json [--out DIR] [--seed N] [--arm ARM]
    pden eval      --ckpt model.ckpt --data cfg.json [--out DIR]
    pden sweep     --config cfg.json --param K --values 1,3,5 [--out DIR] [--seed N]
    pden gradcheck [--op-instances N] [--loss-instances N] [--probes N]

Exit codes: 0 success, 1 runtime failure (divergence, bad checkpoint,
failed gradient check), 2 usage or configuration error.  The output
directory resolves as ``--out`` > config ``out_dir`` > ``$PDEN_OUT_DIR`` >
``./runs``, with a deterministic run id (arm, config hash, seed) appended
unless ``--out`` was given explicitly.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import evaluation
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, build_datasets, load_config, resolved_dict
from .datasets import FormatError
from .pipeline import TrainingDivergedError, pretrain
from .rng import Rng

USAGE_ERROR = 2
RUNTIME_ERROR = 1


def _with_seed(rc: RunConfig, seed) -> RunConfig:
    if seed is None:
        return rc
    train = dataclasses.replace(rc.train, seed=int(seed))
    return dataclasses.replace(rc, train=train)


def _run_id(arm: str, rc: RunConfig) -> str:
    h = evaluation.config_hash_of(resolved_dict(rc))
    return f"{arm}-{h[:12]}-s{rc.train.seed}"


def _resolve_out(explicit, rc: RunConfig, run_id: str) -> Path:
    if explicit:
        return Path(explicit)
    root = rc.out_dir or os.environ.get("PDEN_OUT_DIR") or "runs"
    return Path(root) / run_id


def _cmd_train(args) -> int:
    rc = _with_seed(load_config(args.config), args.seed)
    arm = args.arm
    run_id = _run_id(arm, rc)
    out = _resolve_out(args.out, rc, run_id)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(resolved_dict(rc), indent=2,
                                                sort_keys=True))
    train_ds, test_ds, shifts = build_datasets(rc)
    cfg_hash = evaluation.config_hash_of(resolved_dict(rc))

    if arm == "erm":
        from .pipeline import MetricsLog
        from .checkpoint import save_checkpoint
        log = MetricsLog()
        model = pretrain(train_ds, rc.train, rc.arch, log=log)
        log.write(out / "metrics.csv")
        save_checkpoint(out / "checkpoints" / "task_final.ckpt", model,
                        seed=rc.train.seed)
        table = evaluation.EvalTable()
        evaluation.benchmark_model(model, test_ds, shifts, run_id, "erm",
                                   rc.train, table, cfg_hash)
        table.write(out / "eval.csv")
        final = model
        print(f"[erm] source test accuracy "
              f"{table.rows[0]['accuracy']}, artifacts in {out}")
    elif arm == "pden":
        from .pipeline import run_pden
        result = run_pden(train_ds, rc.train, rc.arch, out_dir=out)
        table = evaluation.EvalTable()
        evaluation.benchmark_model(result.model, test_ds, shifts, run_id, "pden",
                                   rc.train, table, cfg_hash)
        table.write(out / "eval.csv")
        final = result.model
        print(f"[pden] {len(result.pool.synthetic)} synthetic domains, "
              f"source test accuracy {table.rows[0]['accuracy']}, artifacts in {out}")
    elif arm == "compare":
        report = evaluation.compare_arms(train_ds, test_ds, rc.train, rc.arch,
                                         shifts=shifts, run_id=run_id,
                                         config_hash=cfg_hash, out_dir=out)
        final = report.pden_model
        print(f"[compare] shifted-benchmark mean: erm "
              f"{report.erm_mean_shifted:.4f} vs pden {report.pden_mean_shifted:.4f} "
              f"(gain {report.shifted_gain:+.4f}); artifacts in {out}")
    else:  # pragma: no cover - argparse choices guard this
        raise ConfigError(f"unknown arm {arm!r}")

    if rc.few_shot is not None and final is not None:
        fs = rc.few_shot
        rep = evaluation.few_shot_report(final, test_ds, fs.shift, shots=fs.shots,
                                         steps=fs.steps, lr=fs.lr,
                                         heads_only=fs.heads_only,
                                         shot_seed=fs.shot_seed)
        (out / "few_shot.json").write_text(json.dumps(rep, indent=2, sort_keys=True))
        print(f"[few_shot] {rep['domain']}: {rep['accuracy_before']:.4f} -> "
              f"{rep['accuracy_after']:.4f} with {fs.shots} shots/class")
    return 0


def _cmd_eval(args) -> int:
    rc = load_config(args.data)
    model, manifest = load_checkpoint(args.ckpt)
    if model.arch.num_classes != rc.data.num_classes:
        raise ConfigError(
            f"checkpoint has {model.arch.num_classes} classes, data config has "
            f"{rc.data.num_classes}")
    _, test_ds, shifts = build_datasets(rc)
    cfg_hash = evaluation.config_hash_of(resolved_dict(rc))
    run_id = f"eval-{cfg_hash[:12]}"
    table = evaluation.EvalTable()
    evaluation.benchmark_model(model, test_ds, shifts, run_id,
                               manifest.get("kind", "model"), rc.train, table,
                               cfg_hash)
    for row in table.rows:
        print(f"{row['domain']:40s} acc={float(row['accuracy']):.4f} n={row['n']}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        table.write(out / "eval.csv")
        print(f"wrote {out / 'eval.csv'}")
    return 0


def _cmd_sweep(args) -> int:
    rc = _with_seed(load_config(args.config), args.seed)
    if args.param:
        values = [float(v) if "." in v or "e" in v.lower() else int(v)
                  for v in args.values.split(",") if v.strip()]
        if not values:
            raise ConfigError("--values must list at least one number")
        param = args.param
    elif rc.sweep is not None:
        param, values = rc.sweep.param, list(rc.sweep.values)
    else:
        raise ConfigError("sweep needs --param/--values or a sweep config section")
    run_id = _run_id(f"sweep_{param}", rc)
    out = _resolve_out(args.out, rc, run_id)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds, shifts = build_datasets(rc)
    table = evaluation.sweep(train_ds, test_ds, rc.train, rc.arch, param, values,
                             shifts=shifts, run_id=run_id, out_dir=out)
    by_value = {}
    for row in table.rows:
        key = (row["run_id"], row["arm"])
        if row["shift_kind"] != "none":
            by_value.setdefault(key, []).append(float(row["accuracy"]))
    for (rid, arm), accs in sorted(by_value.items()):
        print(f"{rid:32s} {arm:5s} shifted-mean={sum(accs) / len(accs):.4f}")
    print(f"artifacts in {out}")
    return 0


def _cmd_gradcheck(args) -> int:
    from . import gradcheck
    results = gradcheck.run_all(op_instances=args.op_instances,
                                loss_instances=args.loss_instances,
                                loss_probes=args.probes)
    print(gradcheck.report(results))
    return 0 if all(r.passed for r in results) else RUNTIME_ERROR


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pden",
        description="Progressive domain expansion from a single source domain")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one arm (or compare both)")
    p_train.add_argument("--config", required=True, help="JSON run config")
    p_train.add_argument("--out", default=None, help="output directory (exact)")
    p_train.add_argument("--seed", type=int, default=None, help="override train.seed")
    p_train.add_argument("--arm", choices=("erm", "pden", "compare"),
                         default="compare")
    p_train.set_defaults(fn=_cmd_train)

    p_eval = sub.add_parser("eval", help="benchmark a checkpoint")
    p_eval.add_argument("--ckpt", required=True, help="checkpoint file")
    p_eval.add_argument("--data", required=True, help="JSON config (data section used)")
    p_eval.add_argument("--out", default=None, help="where to write eval.csv")
    p_eval.set_defaults(fn=_cmd_eval)

    p_sweep = sub.add_parser("sweep", help="compare arms across one hyperparameter")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--param", default=None,
                         choices=("K", "w_adv", "w_cyc", "w_div"))
    p_sweep.add_argument("--values", default="", help="comma-separated numbers")
    p_sweep.add_argument("--out", default=None)
    p_sweep.add_argument("--seed", type=int, default=None)
    p_sweep.set_defaults(fn=_cmd_sweep)

    p_gc = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p_gc.add_argument("--op-instances", type=int, default=20)
    p_gc.add_argument("--loss-instances", type=int, default=3)
    p_gc.add_argument("--probes", type=int, default=40)
    p_gc.set_defaults(fn=_cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except (CheckpointError, FormatError, TrainingDivergedError) as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME_ERROR
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
