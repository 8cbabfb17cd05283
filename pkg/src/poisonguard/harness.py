"""Periodic-update protocol, experiment sweeps and report output."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import attacks as atk
from .data import (
    BinaryTask,
    ExperimentDataset,
    SampleSet,
    build_rounds,
    load_idx,
    load_mnist,
    make_binary_task,
    synth_images,
)
from .detectors import (
    CAE_EPOCH_CAP,
    DEFAULT_ALPHA,
    DetectorConfig,
    Gmm,
    TopK,
    detection_metrics,
    filter_round,
    score_samples,
    separate,
    train_detectors,
)
from .nn import TrainConfig
from .svm import SvmConfig, accuracy, train_svm

log = logging.getLogger(__name__)

ATTACK_IDS = {kind: i for i, kind in enumerate(atk.KINDS)}
FASHION_CLASSES = {"top": 0, "trouser": 1, "pullover": 2, "dress": 3, "coat": 4,
                   "sandal": 5, "shirt": 6, "sneaker": 7, "bag": 8, "boot": 9}
FASHION_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
ROW_COLUMNS = ("experiment", "task", "attack", "rate", "detector", "separator", "k", "alpha",
               "round", "n_poisons", "n_flagged", "precision", "recall", "f1",
               "acc_clean", "acc_undefended", "acc_filtered")
METRIC_COLUMNS = ("n_poisons", "n_flagged", "precision", "recall", "f1",
                  "acc_clean", "acc_undefended", "acc_filtered")


@dataclass(frozen=True)
class ExperimentConfig:
    tasks: tuple = ("mnist:4-0",)
    attacks: tuple = ("flip",)
    rates: tuple = (0.10,)
    detectors: tuple = ("CAEPlus",)
    separator: str = "gmm"
    alpha: float = DEFAULT_ALPHA
    seed: int = 0
    n_detector_rounds: int = 50
    n_eval_rounds: int = 10
    split_sizes: tuple = (100, 200, 200)
    epoch_scale: float = 1.0
    cae_epochs: int = 100
    rae_epochs: int = 300
    batch_size: int = 256
    learning_rate: float = 1e-3
    recon_loss: str = "l2"
    normalization: str = "robust"
    svm_C: float = 1.0
    svm_tolerance: float = 1e-3
    attack_step: float = 0.1
    attack_iters: int = 50
    attack_tol: float = 1e-4
    attack_gradient: str = "fixed_dual"
    data_root: str | None = None
    synthetic_size: int = 28
    synthetic_per_class: int = 1000

    def __post_init__(self):
        for r in self.rates:
            if not 0.0 <= r <= 0.5:
                raise ValueError(f"poison rate {r} outside [0, 0.5]")
        if not 0.0 < self.epoch_scale <= 1.0:
            raise ValueError("epoch_scale must be in (0, 1]")
        for a in self.attacks:
            if a not in atk.KINDS:
                raise ValueError(f"unknown attack {a!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.n_eval_rounds < 1 or self.n_detector_rounds < 1:
            raise ValueError("need at least one detector-training and one evaluation round")
        parse_separator(self.separator)

    @property
    def scaled_cae_epochs(self) -> int:
        return max(1, int(round(self.cae_epochs * self.epoch_scale)))

    @property
    def scaled_rae_epochs(self) -> int:
        return max(1, int(round(self.rae_epochs * self.epoch_scale)))

    def detector_config(self, seed: int, clean_cae: bool = False) -> DetectorConfig:
        common = dict(batch_size=self.batch_size, learning_rate=self.learning_rate,
                      recon_loss=self.recon_loss)
        cae_epochs = self.scaled_rae_epochs if clean_cae else self.scaled_cae_epochs
        return DetectorConfig(
            cae=TrainConfig(epochs=cae_epochs, rng_seed=seed, **common),
            rae=TrainConfig(epochs=self.scaled_rae_epochs, rng_seed=seed, **common),
            alpha=self.alpha,
            cae_epoch_cap=None if clean_cae else CAE_EPOCH_CAP,
            normalization=self.normalization,
        )

    def attack_config(self, rate: float, seed: int) -> atk.AttackConfig:
        return atk.AttackConfig(poison_rate=rate, step_size=self.attack_step,
                                max_iters=self.attack_iters, improvement_tol=self.attack_tol,
                                rng_seed=seed, svm=self.svm_config(), gradient=self.attack_gradient)

    def svm_config(self, seed: int = 0) -> SvmConfig:
        return SvmConfig(C=self.svm_C, tolerance=self.svm_tolerance, rng_seed=seed)

    def echo(self) -> dict:
        d = asdict(self)
        d["scaled_cae_epochs"] = self.scaled_cae_epochs
        d["scaled_rae_epochs"] = self.scaled_rae_epochs
        d["normalizer_mode"] = ("median/IQR frozen at detector training" if self.normalization == "robust"
                                else "min-max frozen at detector training, clamped to [0,1]")
        d["gmm"] = asdict(Gmm())
        d["attack_schedule"] = "sequential poisons, one retrain per step"
        d["svm_solver"] = "SMO dual, second-order working set"
        return d


def parse_separator(text: str):
    text = text.strip().lower()
    if text == "gmm":
        return Gmm()
    if text.startswith("topk:"):
        return TopK(int(text.split(":", 1)[1]))
    raise ValueError(f"separator must be 'gmm' or 'topk:K', got {text!r}")


def seed_for(base: int, *keys: int) -> int:
    return int(np.random.SeedSequence([base, *keys]).generate_state(1)[0])


# ------------------------------------------------------------------- tasks

def _fashion_task(name, root, seed, cfg) -> tuple:
    pos, neg = (FASHION_CLASSES[c] for c in name.split("-"))
    if root:
        for sub in ("fashion", "fashion-mnist", "."):
            img = Path(root) / sub / FASHION_FILES[0]
            lbl = Path(root) / sub / FASHION_FILES[1]
            if img.exists() and lbl.exists():
                return make_binary_task(load_idx(img, lbl), pos, neg, seed), "idx"
    log.warning("Fashion-MNIST not found; using a synthetic substitute for %s", name)
    task = synth_images(cfg.synthetic_per_class, cfg.synthetic_size,
                        seed_for(seed, pos, neg, 77), name=f"synthetic-{name}")
    return task, "synthetic substitute"


def load_task(spec: str, cfg: ExperimentConfig) -> tuple:
    """Resolve ``source:classes`` into a BinaryTask and a provenance note."""
    source, _, classes = spec.partition(":")
    seed = cfg.seed
    if source == "mnist":
        pos, neg = (int(c) for c in classes.split("-"))
        raw = load_mnist(cfg.data_root)
        origin = "idx" if len(raw.labels) > 5000 else "mlxtend 5k subset"
        return make_binary_task(raw, pos, neg, seed), origin
    if source == "fashion":
        return _fashion_task(classes, cfg.data_root, seed, cfg)
    if source == "synthetic":
        task = synth_images(cfg.synthetic_per_class, cfg.synthetic_size,
                            seed_for(seed, len(classes), 91), name=f"synthetic-{classes}")
        return task, "synthetic"
    raise ValueError(f"unknown dataset source {source!r}")


def experiment_rounds(cfg: ExperimentConfig, task: BinaryTask) -> ExperimentDataset:
    """The round buffers every experiment on ``task`` shares under ``cfg``."""
    return build_rounds(task, cfg.n_detector_rounds + cfg.n_eval_rounds, cfg.split_sizes,
                        seed_for(cfg.seed, 1), n_eval=cfg.n_eval_rounds)


def round_attack_config(cfg: ExperimentConfig, attack: str, rate: float, round_index: int):
    return cfg.attack_config(rate, seed_for(cfg.seed, 2, ATTACK_IDS[attack], round_index))


# ------------------------------------------------------------------ report

@dataclass
class Report:
    experiment: str
    config: dict
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def summary(self) -> list:
        """Mean of every metric over evaluation rounds, per group."""
        groups = {}
        for row in self.rows:
            key = tuple(row[c] for c in ROW_COLUMNS if c not in METRIC_COLUMNS and c != "round")
            groups.setdefault(key, []).append(row)
        out = []
        keys = [c for c in ROW_COLUMNS if c not in METRIC_COLUMNS and c != "round"]
        for key, rows in groups.items():
            rec = dict(zip(keys, key))
            rec["n_rounds"] = len(rows)
            for m in METRIC_COLUMNS:
                vals = [r[m] for r in rows if r[m] is not None]
                rec[m] = float(np.mean(vals)) if vals else None
            out.append(rec)
        return out

    def select(self, **where) -> list:
        return [r for r in self.summary() if all(r.get(k) == v for k, v in where.items())]

    def mean(self, metric, **where) -> float:
        rows = self.select(**where)
        if not rows:
            raise KeyError(f"no summary rows match {where}")
        return float(np.mean([r[metric] for r in rows]))


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def _round6(obj):
    if isinstance(obj, dict):
        return {k: _round6(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round6(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(f"{float(obj):.6g}")
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def emit_report(report: Report, fmt: str = "json", path=None) -> str:
    """Serialize a report (CSV rows or JSON document); writes ``path`` if given."""
    if not report.rows:
        raise ValueError("report has no evaluation rows")
    if fmt == "csv":
        buf = io.StringIO()
        buf.write("# config=" + json.dumps(_round6(report.config), sort_keys=True) + "\n")
        buf.write("# meta=" + json.dumps(_round6(report.meta), sort_keys=True) + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(ROW_COLUMNS)
        for row in report.rows:
            writer.writerow([_fmt(row[c]) for c in ROW_COLUMNS])
        text = buf.getvalue()
    elif fmt == "json":
        doc = {"experiment": report.experiment, "config": report.config, "meta": report.meta,
               "columns": list(ROW_COLUMNS), "rows": report.rows, "summary": report.summary()}
        text = json.dumps(_round6(doc), indent=1, sort_keys=True) + "\n"
    else:
        raise ValueError(f"format must be csv or json, got {fmt!r}")
    if path is not None:
        Path(path).write_text(text)
    return text


def read_csv_report(path) -> list:
    with open(path) as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# ----------------------------------------------------------------- protocol

@dataclass
class _Prepared:
    """Rounds of one task under one attack/rate plus the clean baselines."""

    task_name: str
    dataset: ExperimentDataset
    rounds: list
    clean_acc: dict
    undefended_acc: dict

    def detector_training_data(self, contaminated=True) -> SampleSet:
        parts = [self.rounds[i].contaminated_train if contaminated else self.rounds[i].train
                 for i in self.dataset.detector_training_rounds]
        return SampleSet.concat(parts)


class _Runner:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self._tasks = {}
        self._datasets = {}
        self._prepared = {}
        self.meta = {"tasks": {}}

    def task(self, spec):
        if spec not in self._tasks:
            task, origin = load_task(spec, self.cfg)
            self._tasks[spec] = task
            self.meta["tasks"][spec] = {"source": origin, "pool_size": len(task.samples)}
        return self._tasks[spec]

    def dataset(self, spec) -> ExperimentDataset:
        if spec not in self._datasets:
            ds = experiment_rounds(self.cfg, self.task(spec))
            self._datasets[spec] = ds
            self.meta["tasks"][spec]["sampling"] = ds.sampling
        return self._datasets[spec]

    def svm_accuracy(self, train: SampleSet, test: SampleSet, seed: int) -> float:
        if len(np.unique(train.labels)) < 2:
            # filtering removed a whole class: fall back to the majority label
            return float(np.mean(test.labels == (train.labels[0] if len(train) else 1)))
        model = train_svm(train.flat(), train.labels, self.cfg.svm_config(seed))
        return accuracy(model, test.flat(), test.labels)

    def prepared(self, spec, attack, rate) -> _Prepared:
        key = (spec, attack, rate)
        if key in self._prepared:
            return self._prepared[key]
        ds = self.dataset(spec)
        cfg = self.cfg
        rounds, clean, undefended = [], {}, {}
        for rnd in ds.rounds:
            r = rnd.round_index
            poisoned = atk.poison_round(rnd, attack, round_attack_config(cfg, attack, rate, r))
            rounds.append(poisoned)
            if r in ds.evaluation_rounds:
                seed = seed_for(cfg.seed, 3, r)
                clean[r] = self.svm_accuracy(rnd.train, rnd.test, seed)
                undefended[r] = self.svm_accuracy(poisoned.contaminated_train, rnd.test, seed)
        prep = _Prepared(spec, ds, rounds, clean, undefended)
        self._prepared[key] = prep
        return prep

    def detectors(self, prep: _Prepared, kinds, contaminated=True, clean_cae=False):
        data = prep.detector_training_data(contaminated)
        seed = seed_for(self.cfg.seed, 4)
        return train_detectors(kinds, data, self.cfg.detector_config(seed, clean_cae))

    def eval_rows(self, experiment, prep, attack, rate, detector_name, model, separator,
                  alpha=None, k=None):
        rows = []
        sep_name = "gmm" if isinstance(separator, Gmm) else "topk"
        for r in prep.dataset.evaluation_rounds:
            rnd = prep.rounds[r]
            res = filter_round(model, separator, rnd, alpha)
            m = detection_metrics(res.verdicts, res.truth)
            acc = self.svm_accuracy(res.kept, rnd.test, seed_for(self.cfg.seed, 3, r))
            rows.append({
                "experiment": experiment, "task": prep.task_name, "attack": attack,
                "rate": float(rate), "detector": detector_name, "separator": sep_name,
                "k": k, "alpha": float(model.alpha if alpha is None else alpha), "round": r,
                "n_poisons": int(res.truth.sum()), "n_flagged": int(res.verdicts.sum()),
                "precision": m["precision"], "recall": m["recall"], "f1": m["f1"],
                "acc_clean": prep.clean_acc[r], "acc_undefended": prep.undefended_acc[r],
                "acc_filtered": acc,
            })
        return rows

    def report(self, experiment, rows, **extra) -> Report:
        meta = dict(self.meta)
        meta.update(extra)
        return Report(experiment, self.cfg.echo(), rows, meta)


def run_periodic_update(cfg: ExperimentConfig) -> Report:
    """Poison every round, train detectors on the training rounds, filter the evaluation rounds."""
    run = _Runner(cfg)
    sep = parse_separator(cfg.separator)
    rows = []
    for spec in cfg.tasks:
        for attack in cfg.attacks:
            for rate in cfg.rates:
                prep = run.prepared(spec, attack, rate)
                models = run.detectors(prep, cfg.detectors)
                for name in cfg.detectors:
                    rows += run.eval_rows("periodic", prep, attack, rate, name, models[name], sep)
    return run.report("periodic", rows)


def run_threshold_sweep(cfg: ExperimentConfig, k_grid) -> Report:
    """F1 of TopK(K) for each K, plus the GMM separator as a reference row."""
    run = _Runner(cfg)
    rows = []
    for spec in cfg.tasks:
        for attack in cfg.attacks:
            for rate in cfg.rates:
                prep = run.prepared(spec, attack, rate)
                models = run.detectors(prep, cfg.detectors)
                for name in cfg.detectors:
                    for k in k_grid:
                        rows += run.eval_rows("threshold", prep, attack, rate, name, models[name],
                                              TopK(int(k)), k=int(k))
                    rows += run.eval_rows("threshold", prep, attack, rate, name, models[name], Gmm())
    return run.report("threshold", rows, k_grid=[int(k) for k in k_grid])


def run_alpha_sweep(cfg: ExperimentConfig, alpha_grid) -> Report:
    for a in alpha_grid:
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"alpha {a} outside [0, 1]")
    run = _Runner(cfg)
    sep = parse_separator(cfg.separator)
    rows = []
    for spec in cfg.tasks:
        for attack in cfg.attacks:
            for rate in cfg.rates:
                prep = run.prepared(spec, attack, rate)
                model = run.detectors(prep, ["CAEPlus"])["CAEPlus"]
                for a in alpha_grid:
                    rows += run.eval_rows("alpha", prep, attack, rate, "CAEPlus", model, sep,
                                          alpha=float(a))
    return run.report("alpha", rows, alpha_grid=[float(a) for a in alpha_grid],
                      reference_alpha=DEFAULT_ALPHA)


def run_ablation(cfg: ExperimentConfig) -> Report:
    """RAE vs CAE vs CAE+ on identical rounds, networks and seeds."""
    run = _Runner(cfg)
    sep = parse_separator(cfg.separator)
    kinds = ("RAE", "CAE", "CAEPlus")
    rows = []
    for spec in cfg.tasks:
        for attack in cfg.attacks:
            for rate in cfg.rates:
                prep = run.prepared(spec, attack, rate)
                models = run.detectors(prep, kinds)
                for name in kinds:
                    rows += run.eval_rows("ablation", prep, attack, rate, name, models[name], sep)
    return run.report("ablation", rows)


def run_robustness(cfg: ExperimentConfig) -> Report:
    """Detectors trained on clean vs contaminated data, judged by post-filter SVM accuracy."""
    run = _Runner(cfg)
    sep = parse_separator(cfg.separator)
    rows = []
    for spec in cfg.tasks:
        for attack in cfg.attacks:
            for rate in cfg.rates:
                prep = run.prepared(spec, attack, rate)
                dirty = run.detectors(prep, ["CAEPlus", "Centroid"], contaminated=True)
                clean = run.detectors(prep, ["CAE", "Centroid"], contaminated=False, clean_cae=True)
                variants = {
                    "CAE-clean": clean["CAE"],
                    "CAEPlus-contaminated": dirty["CAEPlus"],
                    "Centroid-clean": clean["Centroid"],
                    "Centroid-contaminated": dirty["Centroid"],
                }
                for name, model in variants.items():
                    rows += run.eval_rows("robustness", prep, attack, rate, name, model, sep)
    return run.report("robustness", rows)


EXPERIMENTS = {
    "periodic": run_periodic_update,
    "threshold": run_threshold_sweep,
    "alpha": run_alpha_sweep,
    "ablation": run_ablation,
    "robustness": run_robustness,
}


def desk_config(**overrides) -> ExperimentConfig:
    """Desk-scale preset: 10 detector-training rounds, epoch scale 0.3, batch 32."""
    base = dict(n_detector_rounds=10, n_eval_rounds=10, epoch_scale=0.3, batch_size=32)
    base.update(overrides)
    return ExperimentConfig(**base)


def config_from_dict(d: dict) -> ExperimentConfig:
    fields = ExperimentConfig.__dataclass_fields__
    clean = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in fields}
    return ExperimentConfig(**clean)


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
