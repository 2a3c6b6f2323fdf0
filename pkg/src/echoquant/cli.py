"""Command-line entry point: ``echoquant {phantom,train,eval,measure,report}``.

Exit status is 0 only when the command finished and wrote all its outputs,
1 on a data or model error and 2 on a usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .dataset import load_dataset, read_manifest, save_study, write_folds, write_manifest
from .exceptions import EchoQuantError
from .phantom import generate_phantom_set, params_to_dict
from .quant import DEFAULT_N_DISKS, measure_study
from .records import LVIndicators
from .training import PRESETS, SampleSet, TrainConfig, evaluate_model, load_model, predict_arrays, read_config_file
from .training import train as run_training

log = logging.getLogger("echoquant")

# flag name -> TrainConfig field
_TRAIN_FLAGS = {
    "batch_size": int, "peak_lr": float, "epochs": int, "warmup_epochs": int, "seed": int,
    "data_root": str, "out": str, "split": str, "resume": str, "input_size": int,
    "max_epochs_this_run": int,
}


def _studies(args):
    ids = read_manifest(args.split) if getattr(args, "split", None) else None
    return load_dataset(args.data_root, ids)


def cmd_phantom(args) -> int:
    out = Path(args.out)
    rows = []
    ids = []
    for study, truth, params in generate_phantom_set(args.n, args.seed, noise=args.noise, prefix=args.prefix):
        save_study(study, out)
        ids.append(study.study_id)
        rows.append({"study_id": study.study_id, **truth.as_dict(), **params_to_dict(params)})
    with (out / "truth.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    write_manifest(ids, out / "splits" / "all.txt")
    if args.holdout:
        if not 0 < args.holdout < args.n:
            raise EchoQuantError(f"--holdout must be between 1 and {args.n - 1}")
        write_manifest(ids[:-args.holdout], out / "splits" / "train.txt")
        write_manifest(ids[-args.holdout:], out / "splits" / "test.txt")
    if args.folds:
        write_folds(ids, out / "splits", n_folds=args.folds, seed=args.seed)
    print(f"wrote {len(ids)} studies to {out}")
    return 0


def build_train_config(args) -> TrainConfig:
    values = dict(PRESETS[args.preset])
    if args.config:
        values.update(read_config_file(args.config))
    for name in _TRAIN_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    if args.no_augment:
        values["augment"] = False
    return TrainConfig(**values)


def cmd_train(args) -> int:
    cfg = build_train_config(args)
    ckpt = run_training(cfg)
    print(ckpt)
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    studies = _studies(args)
    report = evaluate_model(model, studies, args.n_disks)
    out = Path(args.out)
    report.write_csv(out / "eval.csv")
    (out / "summary.json").write_text(json.dumps(report.summary(), indent=1))
    print(json.dumps(report.summary()))
    return 0


def cmd_measure(args) -> int:
    studies = _studies(args)
    cols = ["study_id", *LVIndicators.FIELDS]
    rows = [{"study_id": st.study_id, **measure_study(st, args.n_disks).as_dict()} for st in studies]
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


def cmd_report(args) -> int:
    from .report import write_report  # matplotlib only when plotting
    model = load_model(args.checkpoint)
    studies = _studies(args)
    report = evaluate_model(model, studies, args.n_disks)
    masks, points = predict_arrays(model, SampleSet.from_studies(studies).images)
    for path in write_report(report, studies, masks, points, args.out, args.max_overlays):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="echoquant", description="LV segmentation, landmarks and volumetry.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="generate a synthetic study set with known volumes")
    ph.add_argument("--n", type=int, default=16)
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--noise", type=float, default=None)
    ph.add_argument("--prefix", default="phantom")
    ph.add_argument("--holdout", type=int, default=0, help="write train/test manifests holding out the last K")
    ph.add_argument("--folds", type=int, default=0, help="also write rotating 8:1:1 fold manifests")
    ph.add_argument("--out", required=True)
    ph.set_defaults(func=cmd_phantom)

    tr = sub.add_parser("train", help="train the dual-task model")
    tr.add_argument("--config", help="key = value file; flags override it")
    tr.add_argument("--preset", choices=sorted(PRESETS), default="default")
    for name, typ in _TRAIN_FLAGS.items():
        tr.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    tr.add_argument("--no-augment", action="store_true")
    tr.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "score a checkpoint"),
                                 ("report", cmd_report, "plots and overlays for a checkpoint")):
        ev = sub.add_parser(name, help=helptext)
        ev.add_argument("--checkpoint", required=True)
        ev.add_argument("--data-root", required=True)
        ev.add_argument("--split")
        ev.add_argument("--n-disks", type=int, default=DEFAULT_N_DISKS)
        ev.add_argument("--out", required=True)
        if name == "report":
            ev.add_argument("--max-overlays", type=int, default=4)
        ev.set_defaults(func=func)

    me = sub.add_parser("measure", help="biplane volumetry from annotated masks, no model")
    me.add_argument("--data-root", required=True)
    me.add_argument("--split")
    me.add_argument("--n-disks", type=int, default=DEFAULT_N_DISKS)
    me.add_argument("--out", help="CSV path (default: stdout)")
    me.set_defaults(func=cmd_measure)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (EchoQuantError, ValueError, OSError) as exc:
        print(f"echoquant {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
