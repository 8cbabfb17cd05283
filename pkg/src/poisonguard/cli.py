"""Command-line entry point: attack, train-detector, filter, experiment."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import attacks as atk
from . import harness as H
from .data import DATA_ROOT_ENV, RoundBuffer, SampleSet
from .detectors import (
    DETECTOR_KINDS,
    NORMALIZATIONS,
    detection_metrics,
    filter_round,
    load_detector,
    save_detector,
    train_detectors,
    verdict_records,
)
from .svm import accuracy, train_svm

log = logging.getLogger("poisonguard")


def _floats(text):
    return tuple(float(v) for v in text.split(","))


def _names(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _add_common(p):
    p.add_argument("--data-root", default=None,
                   help=f"directory holding IDX files (default: ${DATA_ROOT_ENV})")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--desk", action="store_true",
                   help="desk-scale preset: 10+10 rounds, epoch scale 0.3, batch 32")
    p.add_argument("--epoch-scale", type=float, default=None)
    p.add_argument("--detector-rounds", type=int, default=None)
    p.add_argument("--eval-rounds", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--C", dest="svm_C", type=float, default=None, help="SVM regularization")
    p.add_argument("--svm-tolerance", type=float, default=None)


def _add_attack_flags(p):
    p.add_argument("--kind", "--attack", dest="attack", choices=atk.KINDS, default="flip")
    p.add_argument("--rate", type=float, default=0.10)
    p.add_argument("--step", dest="attack_step", type=float, default=None)
    p.add_argument("--iters", dest="attack_iters", type=int, default=None)
    p.add_argument("--gradient", dest="attack_gradient", choices=atk.GRADIENTS, default=None)


def _add_detector_flags(p):
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--normalization", choices=NORMALIZATIONS, default=None)


def _config(args, **extra) -> H.ExperimentConfig:
    base = H.desk_config() if args.desk else H.ExperimentConfig()
    over = dict(
        seed=args.seed,
        data_root=args.data_root or os.environ.get(DATA_ROOT_ENV),
        epoch_scale=args.epoch_scale,
        n_detector_rounds=args.detector_rounds,
        n_eval_rounds=args.eval_rounds,
        batch_size=args.batch_size,
        svm_C=args.svm_C,
        svm_tolerance=args.svm_tolerance,
    )
    for name in ("attack_step", "attack_iters", "attack_gradient", "alpha", "normalization",
                 "separator"):
        if hasattr(args, name):
            over[name] = getattr(args, name)
    over.update(extra)
    return H.with_overrides(base, **over)


def _round(cfg, task_spec, index) -> RoundBuffer:
    ds = H.experiment_rounds(cfg, H.load_task(task_spec, cfg)[0])
    if not 0 <= index < len(ds.rounds):
        raise SystemExit(f"round {index} outside 0..{len(ds.rounds) - 1}")
    return ds.rounds[index]


def cmd_attack(args) -> int:
    cfg = _config(args)
    rnd = _round(cfg, args.task, args.round)
    acfg = H.round_attack_config(cfg, args.attack, args.rate, args.round)
    n_p = acfg.n_poisons(len(rnd.train))
    ps = atk.generate_poisons(args.attack, rnd.train, rnd.validation, n_p, acfg)
    doc = ps.to_json()
    doc.update(task=args.task, round=args.round, seed=args.seed, attack=args.attack,
               rate=args.rate, attack_config=atk.config_dict(acfg))
    with open(args.out, "w") as f:
        json.dump(doc, f)
    gains = [t[-1] - t[0] for t in ps.trajectories if t]
    print(f"{len(ps)} {args.attack} poisons -> {args.out}"
          + (f" (mean validation-loss gain {np.mean(gains):.4f})" if gains else ""))
    return 0


def cmd_train_detector(args) -> int:
    cfg = _config(args)
    ds = H.experiment_rounds(cfg, H.load_task(args.task, cfg)[0])
    parts = []
    for i in ds.detector_training_rounds:
        rnd = ds.rounds[i]
        if args.rate > 0:
            rnd = atk.poison_round(rnd, args.attack, H.round_attack_config(cfg, args.attack, args.rate, i))
        parts.append(rnd.contaminated_train)
    data = SampleSet.concat(parts)
    dcfg = cfg.detector_config(H.seed_for(cfg.seed, 4))
    model = train_detectors([args.detector], data, dcfg)[args.detector]
    save_detector(model, args.out)
    print(f"{args.detector} trained on {len(data)} samples "
          f"({int(data.poison.sum())} poisoned) -> {args.out}")
    return 0


def cmd_filter(args) -> int:
    with open(args.poisons) as f:
        doc = json.load(f)
    cfg = _config(args, seed=doc.get("seed", args.seed))
    task = args.task or doc["task"]
    index = doc["round"] if args.round is None else args.round
    rnd = _round(cfg, task, index)
    ps = atk.PoisonSet.from_json(doc)
    rnd = RoundBuffer(rnd.round_index, rnd.train, rnd.validation, rnd.test, ps.poisons)
    model = load_detector(args.detector)
    res = filter_round(model, H.parse_separator(args.separator), rnd, args.alpha)
    metrics = detection_metrics(res.verdicts, res.truth)

    def acc(train):
        if len(np.unique(train.labels)) < 2:
            return None
        m = train_svm(train.flat(), train.labels, cfg.svm_config())
        return accuracy(m, rnd.test.flat(), rnd.test.labels)

    out = {
        "task": task, "round": index, "detector": model.kind, "separator": args.separator,
        "metrics": metrics, "n_kept": len(res.kept), "n_flagged": int(res.verdicts.sum()),
        "acc_undefended": acc(rnd.contaminated_train), "acc_filtered": acc(res.kept),
        "verdicts": verdict_records(res),
    }
    with open(args.out, "w") as f:
        json.dump(out, f, indent=1)
    print(f"flagged {out['n_flagged']}/{len(res.verdicts)}  f1={metrics['f1']:.3f}  "
          f"acc undefended={out['acc_undefended']}  filtered={out['acc_filtered']}  -> {args.out}")
    return 0


def cmd_experiment(args) -> int:
    if args.config:
        with open(args.config) as f:
            cfg = H.config_from_dict(json.load(f))
    else:
        cfg = _config(
            args,
            tasks=_names(args.tasks) if args.tasks else None,
            attacks=_names(args.attacks) if args.attacks else None,
            rates=_floats(args.rates) if args.rates else None,
            detectors=_names(args.detectors) if args.detectors else None,
        )
    name = args.name
    if name == "threshold":
        report = H.run_threshold_sweep(cfg, [int(k) for k in _floats(args.k_grid)])
    elif name == "alpha":
        report = H.run_alpha_sweep(cfg, _floats(args.alpha_grid))
    else:
        report = H.EXPERIMENTS[name](cfg)
    text = H.emit_report(report, args.format, args.out)
    if args.out is None:
        sys.stdout.write(text)
    else:
        for row in report.summary():
            print(f"{row['task']:>24} {row['attack']:>8} {row['detector']:>22} "
                  f"f1={row['f1']:.3f} acc_filtered={row['acc_filtered']:.3f}")
        print(f"report -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poisonguard",
        description="Poisoning attacks on a linear SVM and auto-encoder based poison filtering.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("attack", help="generate poisons for one round")
    _add_common(p)
    _add_attack_flags(p)
    p.add_argument("--task", default="mnist:4-0")
    p.add_argument("--round", type=int, default=0)
    p.add_argument("--out", default="poisons.json")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("train-detector", help="train a detector on the detector-training rounds")
    _add_common(p)
    _add_attack_flags(p)
    _add_detector_flags(p)
    p.add_argument("--detector", choices=DETECTOR_KINDS, default="CAEPlus")
    p.add_argument("--task", default="mnist:4-0")
    p.add_argument("--out", default="detector.npz")
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("filter", help="score a poisoned round and drop flagged samples")
    _add_common(p)
    p.add_argument("--detector", required=True, help="checkpoint from train-detector")
    p.add_argument("--poisons", required=True, help="JSON from the attack subcommand")
    p.add_argument("--task", default=None, help="defaults to the task recorded in --poisons")
    p.add_argument("--round", type=int, default=None)
    p.add_argument("--separator", default="gmm", help="gmm or topk:K")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--out", default="verdicts.json")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("experiment", help="run a full experiment and write a report")
    p.add_argument("name", choices=sorted(H.EXPERIMENTS))
    _add_common(p)
    _add_detector_flags(p)
    p.add_argument("--config", default=None, help="JSON ExperimentConfig (overrides flags)")
    p.add_argument("--tasks", default=None, help="comma list, e.g. mnist:4-0,fashion:sandal-sneaker")
    p.add_argument("--attacks", default=None, help="comma list of flip,optimal,semi,mixed")
    p.add_argument("--rates", default=None, help="comma list of poison rates")
    p.add_argument("--detectors", default=None, help="comma list of RAE,CAE,CAEPlus,Centroid")
    p.add_argument("--separator", default=None, help="gmm or topk:K")
    p.add_argument("--k-grid", default="0,5,10,15,20,30")
    p.add_argument("--alpha-grid", default="0,0.2,0.4,0.5,0.66,0.8,1")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
