"""Poison detectors (RAE, CAE, CAE+, centroid outlier) and score separation."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import RoundBuffer, SampleSet
from .nn import (
    NetworkParams,
    TrainConfig,
    build_architecture,
    cross_entropy,
    init_params,
    l1_reconstruction_error,
    predict_batched,
    train_network,
)
from .nn.network import NetworkSpec

DETECTOR_KINDS = ("RAE", "CAE", "CAEPlus", "Centroid")
DEFAULT_ALPHA = 0.66
CAE_EPOCH_CAP = 100
NORMALIZATIONS = ("robust", "minmax")


class UntrainedDetectorError(RuntimeError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    cae: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=100))
    rae: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=300))
    alpha: float = DEFAULT_ALPHA
    # early-stopping budget for the classifier branch; None lifts it (clean-data CAE)
    cae_epoch_cap: int | None = CAE_EPOCH_CAP
    normalization: str = "robust"

    def __post_init__(self):
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.cae_epoch_cap is not None and self.cae.epochs > self.cae_epoch_cap:
            raise ValueError(
                f"CAE epochs {self.cae.epochs} exceed the early-stopping cap {self.cae_epoch_cap}")


@dataclass(frozen=True)
class Normalizer:
    """Per-channel affine scaling frozen at detector-training time.

    ``minmax`` maps the training min/max to 0/1 and clamps.  ``robust`` (the
    default) subtracts the training median and divides by the interquartile
    range without clamping; both statistics come from the clean majority of a
    contaminated training set, whereas its extremes are set by the poisons.
    """

    method: str = "robust"
    re_center: float = 0.0
    re_scale: float = 1.0
    loss_center: float = 0.0
    loss_scale: float = 1.0

    def __post_init__(self):
        if self.method not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.method!r}; expected one of {NORMALIZATIONS}")

    def _scale(self, v, center, scale):
        v = np.asarray(v, dtype=np.float64)
        if scale <= 0.0:  # constant channel
            return np.zeros_like(v)
        out = (v - center) / scale
        return np.clip(out, 0.0, 1.0) if self.method == "minmax" else out

    def re(self, v):
        return self._scale(v, self.re_center, self.re_scale)

    def loss(self, v):
        return self._scale(v, self.loss_center, self.loss_scale)

    @staticmethod
    def _stats(v, method):
        v = np.asarray(v, dtype=np.float64)
        if method == "minmax":
            return float(v.min()), float(v.max() - v.min())
        q1, med, q3 = np.percentile(v, [25.0, 50.0, 75.0])
        return float(med), float(q3 - q1)

    @classmethod
    def fit(cls, re_raw, loss_raw, method: str = "robust") -> "Normalizer":
        return cls(method, *cls._stats(re_raw, method), *cls._stats(loss_raw, method))


@dataclass
class DetectorModel:
    kind: str
    alpha: float = DEFAULT_ALPHA
    cae_params: NetworkParams | None = None
    rae_params: NetworkParams | None = None
    centroids: dict | None = None
    normalizer: Normalizer | None = None
    history: dict = field(default_factory=dict)

    @property
    def trained(self) -> bool:
        return self.normalizer is not None


@dataclass(frozen=True)
class ScoredSample:
    re: float
    loss: float
    combined: float
    origin_id: int = -1


@dataclass
class Scores:
    re: np.ndarray
    loss: np.ndarray
    combined: np.ndarray

    def __len__(self):
        return len(self.combined)

    def __getitem__(self, i) -> ScoredSample:
        return ScoredSample(float(self.re[i]), float(self.loss[i]), float(self.combined[i]))


# ----------------------------------------------------------------- training

def _as_images(samples: SampleSet) -> np.ndarray:
    x = samples.features
    if x.ndim != 4:
        raise ValueError(f"auto-encoder detectors need HxWxC images, got {samples.feature_shape}")
    return x


def raw_channels(model: DetectorModel, samples: SampleSet):
    """Unnormalized (reconstruction error, classification loss) per sample."""
    n = len(samples)
    if model.kind == "Centroid":
        dist = np.zeros(n)
        X = samples.flat().astype(np.float64)
        for lab, c in model.centroids.items():
            m = samples.labels == lab
            dist[m] = np.linalg.norm(X[m] - c, axis=1)
        return dist, np.zeros(n)
    x = _as_images(samples)
    re = loss = np.zeros(n)
    if model.kind in ("RAE", "CAEPlus"):
        recon, _ = predict_batched(model.rae_params, x)
        re = l1_reconstruction_error(x, recon)
    if model.kind in ("CAE", "CAEPlus"):
        recon, probs = predict_batched(model.cae_params, x)
        loss = cross_entropy(probs, samples.labels)
        if model.kind == "CAE":
            re = l1_reconstruction_error(x, recon)
    return re, loss


def train_detector(kind: str, training_data: SampleSet, cfg: DetectorConfig = DetectorConfig(),
                   alpha: float | None = None) -> DetectorModel:
    return train_detectors([kind], training_data, cfg, alpha)[kind]


def train_detectors(kinds, training_data: SampleSet, cfg: DetectorConfig = DetectorConfig(),
                    alpha: float | None = None) -> dict:
    """Train several detector kinds, sharing the CAE and RAE networks between them.

    CAE+ is the CAE network's classifier plus the RAE network's decoder, so an
    ablation over {RAE, CAE, CAE+} needs only one of each network.
    """
    kinds = list(kinds)
    for kind in kinds:
        if kind not in DETECTOR_KINDS:
            raise ValueError(f"unknown detector {kind!r}; expected one of {DETECTOR_KINDS}")
    if len(training_data) == 0:
        raise ValueError("detector training data is empty")
    alpha = cfg.alpha if alpha is None else alpha
    labels = training_data.labels
    needs_labels = {"CAE", "CAEPlus", "Centroid"} & set(kinds)
    if needs_labels and len(np.unique(labels)) < 2:
        raise ValueError(f"{sorted(needs_labels)} need both labels in their training data")

    cae = rae = history_cae = history_rae = None
    if {"CAE", "CAEPlus"} & set(kinds):
        x = _as_images(training_data)
        p = init_params(build_architecture("CAE", x.shape[1:], 2), cfg.cae.rng_seed)
        cae, history_cae = train_network(p, x, labels, cfg.cae)
    if {"RAE", "CAEPlus"} & set(kinds):
        x = _as_images(training_data)
        p = init_params(build_architecture("RAE", x.shape[1:]), cfg.rae.rng_seed + 1)
        rae, history_rae = train_network(p, x, None, cfg.rae)

    models = {}
    for kind in kinds:
        model = DetectorModel(kind, alpha)
        if kind == "Centroid":
            X = training_data.flat().astype(np.float64)
            model.centroids = {int(lab): X[labels == lab].mean(axis=0) for lab in (1, -1)}
        if kind in ("CAE", "CAEPlus"):
            model.cae_params, model.history["cae"] = cae, history_cae
        if kind in ("RAE", "CAEPlus"):
            model.rae_params, model.history["rae"] = rae, history_rae
        model.normalizer = Normalizer.fit(*raw_channels(model, training_data), cfg.normalization)
        models[kind] = model
    return models


# ------------------------------------------------------------------ scoring

def combine(re, loss, alpha):
    return alpha * np.asarray(re) + (1.0 - alpha) * np.asarray(loss)


def score_samples(model: DetectorModel, samples: SampleSet, alpha: float | None = None) -> Scores:
    if not model.trained:
        raise UntrainedDetectorError("detector has not been trained")
    alpha = model.alpha if alpha is None else alpha
    re_raw, loss_raw = raw_channels(model, samples)
    re = model.normalizer.re(re_raw)
    loss = model.normalizer.loss(loss_raw)
    if model.kind == "Centroid":
        combined = np.asarray(re_raw, dtype=np.float64)
    elif model.kind == "RAE":
        combined = re
    else:
        combined = combine(re, loss, alpha)
    return Scores(re, loss, combined)


def score(model: DetectorModel, sample, alpha: float | None = None) -> ScoredSample:
    """Score a single ``LabeledSample``."""
    one = SampleSet(sample.features[None], np.array([sample.label]))
    s = score_samples(model, one, alpha)[0]
    return ScoredSample(s.re, s.loss, s.combined, sample.origin_id)


# ---------------------------------------------------------------- separation

@dataclass
class GmmParams:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    n_iter: int
    log_likelihood: float
    history: list
    degenerate: bool = False

    @property
    def poison_component(self) -> int:
        return int(np.argmax(self.means))

    @property
    def pooled_std(self) -> float:
        return float(np.sqrt(self.weights @ self.variances))


def _log_gauss(x, mu, var):
    return -0.5 * (np.log(2 * np.pi * var)[None, :] + (x[:, None] - mu[None, :]) ** 2 / var[None, :])


def _logsumexp(a):
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def fit_gmm_1d(values, max_iters: int = 200, tol: float = 1e-6,
               variance_floor: float = 1e-8) -> GmmParams:
    """Two-component univariate Gaussian mixture fitted by EM."""
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size < 2 or np.ptp(x) == 0.0:
        v = float(x[0]) if x.size else 0.0
        return GmmParams(np.array([1.0, 0.0]), np.array([v, v]),
                         np.full(2, variance_floor), 0, float("nan"), [], degenerate=True)
    mu = np.percentile(x, [25.0, 75.0])
    if mu[0] == mu[1]:  # quartiles tie when most values coincide; EM could never split them
        mu = np.array([x.min(), x.max()])
    var = np.full(2, max(x.var(), variance_floor))
    w = np.array([0.5, 0.5])
    history = []
    prev = -np.inf
    it = 0
    for it in range(1, max_iters + 1):
        logp = np.log(w)[None, :] + _log_gauss(x, mu, var)
        norm = _logsumexp(logp)
        ll = float(norm.sum())
        history.append(ll)
        if ll - prev < tol:
            break
        prev = ll
        resp = np.exp(logp - norm[:, None])
        nk = resp.sum(axis=0)
        if np.any(nk <= 0):
            break
        w = nk / x.size
        mu = (resp * x[:, None]).sum(axis=0) / nk
        var = np.maximum((resp * (x[:, None] - mu) ** 2).sum(axis=0) / nk, variance_floor)
    final = float(_logsumexp(np.log(w)[None, :] + _log_gauss(x, mu, var)).sum())
    if final > history[-1]:
        history.append(final)
    return GmmParams(w, mu, var, it, final, history)


def gmm_posteriors(g: GmmParams, values) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64).ravel()
    logp = np.log(np.maximum(g.weights, 1e-300))[None, :] + _log_gauss(x, g.means, g.variances)
    return np.exp(logp - _logsumexp(logp)[:, None])


@dataclass(frozen=True)
class Gmm:
    min_separation: float = 2.5
    max_iters: int = 200
    tol: float = 1e-6
    variance_floor: float = 1e-8


@dataclass(frozen=True)
class TopK:
    k: int

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("K must be >= 0")


def separate(scores, separator=Gmm()) -> np.ndarray:
    """Boolean verdicts (True = poison) for a collection of scores."""
    combined = scores.combined if isinstance(scores, Scores) else np.asarray(
        [s.combined if isinstance(s, ScoredSample) else s for s in scores], dtype=np.float64)
    n = len(combined)
    verdicts = np.zeros(n, bool)
    if isinstance(separator, TopK):
        k = min(separator.k, n)
        if k:
            # stable sort on the negated score keeps input order among ties
            verdicts[np.argsort(-combined, kind="stable")[:k]] = True
        return verdicts
    if n == 0:
        return verdicts
    g = fit_gmm_1d(combined, separator.max_iters, separator.tol, separator.variance_floor)
    if g.degenerate:
        return verdicts
    if abs(g.means[1] - g.means[0]) < separator.min_separation * g.pooled_std:
        return verdicts
    post = gmm_posteriors(g, combined)
    p = g.poison_component
    return post[:, p] > post[:, 1 - p]


def detection_metrics(verdicts, truth) -> dict:
    """Precision/recall/F1; with no poisons and no flags everything is 1.0."""
    v = np.asarray(verdicts, bool)
    t = np.asarray(truth, bool)
    if v.shape != t.shape:
        raise ValueError("verdicts and ground truth differ in length")
    tp = int(np.sum(v & t))
    fp = int(np.sum(v & ~t))
    fn = int(np.sum(~v & t))
    if tp + fp + fn == 0:
        return {"precision": 1.0, "recall": 1.0, "f1": 1.0}
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1}


@dataclass
class FilterResult:
    kept: SampleSet
    verdicts: np.ndarray
    scores: Scores
    truth: np.ndarray


def filter_round(model: DetectorModel, separator, round_: RoundBuffer,
                 alpha: float | None = None) -> FilterResult:
    data = round_.contaminated_train
    scores = score_samples(model, data, alpha)
    verdicts = separate(scores, separator)
    return FilterResult(data[~verdicts], verdicts, scores, data.poison.copy())


def verdict_records(result: FilterResult) -> list:
    s = result.scores
    return [
        {"index": i, "re": float(s.re[i]), "loss": float(s.loss[i]),
         "combined": float(s.combined[i]), "poison": bool(result.verdicts[i])}
        for i in range(len(s))
    ]


# -------------------------------------------------------------- checkpoints

def save_detector(model: DetectorModel, path) -> None:
    if not model.trained:
        raise UntrainedDetectorError("cannot save an untrained detector")
    arrays = {}
    header = {"version": 1, "kind": model.kind, "alpha": model.alpha,
              "normalizer": asdict(model.normalizer), "networks": {}}
    for name in ("cae_params", "rae_params"):
        p = getattr(model, name)
        if p is None:
            continue
        header["networks"][name] = {"spec": p.spec.to_dict(), "order": list(p.weights)}
        for k, v in p.weights.items():
            arrays[f"{name}/{k}"] = v
    if model.centroids is not None:
        for lab, c in model.centroids.items():
            arrays[f"centroid/{lab}"] = c
    np.savez(path, __header__=np.array(json.dumps(header)), **arrays)


def load_detector(path) -> DetectorModel:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        model = DetectorModel(header["kind"], header["alpha"],
                              normalizer=Normalizer(**header["normalizer"]))
        for name, net in header["networks"].items():
            spec = NetworkSpec.from_dict(net["spec"])
            setattr(model, name, NetworkParams(spec, {k: z[f"{name}/{k}"] for k in net["order"]}))
        cents = {int(k.split("/")[1]): z[k] for k in z.files if k.startswith("centroid/")}
        model.centroids = cents or None
    return model
