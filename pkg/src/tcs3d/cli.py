"""Command-line entry point: ``tcs3d {synth,train,eval,gradcheck,sweep,report}``.

Exit codes: 0 success, 1 a verification failed, 2 usage or IO error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace
from typing import Dict, List, Optional, Sequence, Tuple

from . import gradcheck, metrics, plotting
from .data import (CLASS_CODES, DatasetSpec, SpecError, generate, load_dataset,
                   read_annotations, read_keyvalue, save_dataset)
from .model import BehaviorModel, ModelConfig
from .trainkit import (DEFAULT_GAMMAS, DivergenceError, TrainConfig, TrainLog, evaluate_split,
                       gamma_sweep, read_sweep_csv, train, write_sweep_csv)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
MODULES = ("tensor", "attention", "backbone", "loss")


class UsageError(Exception):
    pass


def _split_config(items: Dict[str, str]) -> Tuple[Dict[str, str], Dict[str, str]]:
    """Keys prefixed ``model.`` configure the network, the rest the optimizer."""
    train_items, model_items = {}, {}
    for k, v in items.items():
        if k.startswith("model."):
            model_items[k[len("model."):]] = v
        else:
            train_items[k] = v
    return train_items, model_items


def load_configs(path: Optional[str], seed: Optional[int] = None) -> Tuple[TrainConfig, ModelConfig]:
    items = read_keyvalue(path) if path else {}
    t_items, m_items = _split_config(items)
    cfg = TrainConfig.from_items(t_items)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg, ModelConfig.from_items(m_items)


def _require_dir(path: str, what: str) -> None:
    if not os.path.isdir(path):
        raise UsageError(f"{what} directory {path!r} does not exist")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    items = read_keyvalue(args.spec) if args.spec else {}
    if args.seed is not None:
        items["seed"] = str(args.seed)
    spec = DatasetSpec.from_items(items)
    ds = generate(spec)
    save_dataset(ds, args.out)
    n = {s: len(ds.ids(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(ds.clip_ids)} clips, {len(ds.annotations)} annotations to {args.out}")
    print(f"split train={n['train']} val={n['val']} test={n['test']} classes={len(CLASS_CODES)}")
    return EXIT_OK


def cmd_train(args) -> int:
    _require_dir(args.data, "data")
    cfg, model_cfg = load_configs(args.config, args.seed)
    ds = load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    model = BehaviorModel.init(model_cfg, cfg.seed)
    log = train(model, ds, cfg)
    model.save(os.path.join(args.out, "checkpoint.txt"))
    log.write_csv(os.path.join(args.out, "trainlog.csv"))
    cfg.save(os.path.join(args.out, "config.txt"))
    last = log.rows[-1]
    print(f"{cfg.label()} epochs={len(log.rows)} loss={last.loss:.6f} "
          f"val_map={last.map:.4f} val_fr={last.fr:.4f} val_mr={last.mr:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.gt or args.pred:
        if not (args.gt and args.pred):
            raise UsageError("--gt and --pred must be given together")
        gt = read_annotations(args.gt)
        pred = read_annotations(args.pred)
        if any(r.score is None for r in pred):
            raise UsageError(f"{args.pred}: every prediction needs a score column")
        report = metrics.evaluate(gt, pred, score_thresh=args.score_thresh)
    else:
        if not (args.data and args.ckpt):
            raise UsageError("eval needs --data and --ckpt, or --gt and --pred")
        _require_dir(args.data, "data")
        ds = load_dataset(args.data)
        model = BehaviorModel.load(args.ckpt)
        report = evaluate_split(model, ds, args.split, args.score_thresh)
    sys.stdout.write(metrics.format_report(report, list(CLASS_CODES)))
    if args.out:
        metrics.write_report(args.out, report)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    modules = MODULES if args.module == "all" else (args.module,)
    seeds = range(args.seed, args.seed + args.seeds)
    results = gradcheck.run_suite(modules, seeds, corrupt=args.inject_fault)
    worst = gradcheck.summarize(results)
    bad = [n for n, e in worst.items() if not e <= gradcheck.TOLERANCE]
    for name, err in worst.items():
        flag = "ok" if name not in bad else "FAIL"
        print(f"{name:<28} {err:.3e} {flag}")
    if bad:
        print(f"gradient check failed for: {', '.join(bad)}", file=sys.stderr)
        return EXIT_FAIL
    print(f"all {len(worst)} ops within {gradcheck.TOLERANCE:g}")
    return EXIT_OK


def _parse_gammas(text: str) -> List[float]:
    try:
        gammas = [float(g) for g in text.split(",") if g.strip()]
    except ValueError:
        raise UsageError(f"--gammas must be a comma-separated list of numbers, got {text!r}") from None
    if not gammas:
        raise UsageError("--gammas is empty")
    return gammas


def cmd_sweep(args) -> int:
    _require_dir(args.data, "data")
    cfg, model_cfg = load_configs(args.config, args.seed)
    gammas = _parse_gammas(args.gammas) if args.gammas else list(DEFAULT_GAMMAS)
    ds = load_dataset(args.data)
    rows = gamma_sweep(ds, gammas, cfg, model_cfg, split=args.split)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "sweep.csv")
    write_sweep_csv(path, rows)
    for r in rows:
        print(f"{r['loss']:<5} {r['gamma'] or '-':>6} map={r['map']:.4f} "
              f"fr={r['fr']:.4f} mr={r['mr']:.4f} tail_ap={r['tail_ap']:.4f}")
    print(f"wrote {path}")
    return EXIT_OK


def _labelled(spec: str) -> Tuple[str, str]:
    if "=" in spec:
        label, path = spec.split("=", 1)
        return label, path
    return os.path.basename(os.path.dirname(os.path.abspath(spec))) or spec, spec


def write_curves_csv(path, logs: Dict[str, TrainLog]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "epoch", "loss"])
        for label, log in logs.items():
            for r in log.rows:
                w.writerow([label, r.epoch, repr(r.loss)])


def write_class_ap_csv(path, per_class: Dict[str, Sequence[Optional[float]]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run"] + list(CLASS_CODES))
        for label, aps in per_class.items():
            w.writerow([label] + ["na" if a is None else repr(a) for a in aps])


def cmd_report(args) -> int:
    if not (args.log or args.sweep or args.eval):
        raise UsageError("report needs at least one of --log, --sweep, --eval")
    logs = {}
    for spec in args.log or []:
        label, path = _labelled(spec)
        logs[label] = TrainLog.read_csv(path)
    per_class = {}
    for spec in args.eval or []:
        label, path = _labelled(spec)
        rep = metrics.read_report(path)
        per_class[label] = [rep.get(f"ap.{c}") for c in range(len(CLASS_CODES))]
    rows = read_sweep_csv(args.sweep) if args.sweep else None
    os.makedirs(args.out, exist_ok=True)
    written = []
    if logs:
        p = os.path.join(args.out, "loss_curves.csv")
        write_curves_csv(p, logs)
        written.append(p)
    if rows:
        p = os.path.join(args.out, "gamma_sweep.csv")
        write_sweep_csv(p, [dict(r, gamma="" if r["gamma"] is None else repr(r["gamma"]))
                            for r in rows])
        written.append(p)
    if per_class:
        p = os.path.join(args.out, "class_ap.csv")
        write_class_ap_csv(p, per_class)
        written.append(p)
    written += plotting.render_all(args.out, logs, rows, per_class, fmt=args.format)
    for p in written:
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tcs3d", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic long-tail dataset")
    s.add_argument("--spec", help="key=value dataset spec (defaults if omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model and write checkpoint + log")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="key=value training config; model.* keys set the network")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint or a prediction CSV")
    s.add_argument("--data")
    s.add_argument("--ckpt")
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--gt", help="ground-truth annotation CSV")
    s.add_argument("--pred", help="scored prediction CSV")
    s.add_argument("--score-thresh", type=float, default=metrics.SCORE_THRESHOLD)
    s.add_argument("--out", help="write key=value report here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--module", default="all", choices=("all",) + MODULES)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    s.add_argument("--inject-fault", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("sweep", help="train BCE plus FBce over a gamma grid")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--gammas", help="comma-separated, default 0.1..10")
    s.add_argument("--split", default="test", choices=("val", "test"))
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("report", help="render figures and their CSV tables")
    s.add_argument("--log", action="append", help="[label=]trainlog.csv, repeatable")
    s.add_argument("--sweep", help="sweep.csv")
    s.add_argument("--eval", action="append", help="[label=]report file, repeatable")
    s.add_argument("--format", default="png", choices=("png", "svg"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except SpecError as exc:
        print(f"error: invalid spec field {exc.field}: {exc}", file=sys.stderr)
    except (UsageError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
