"""Fixed CAE / RAE architectures, joint loss, and the training loop."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .layers import (
    LAYER_TYPES,
    Conv3x3,
    Dense,
    Dropout,
    Flatten,
    Layer,
    MaxPool2x2,
    Softmax,
    Upsample2x2,
)
from .optim import AdamState, adam_step

CHECKPOINT_VERSION = 1
PROB_FLOOR = 1e-12
SECTIONS = ("encoder", "decoder", "head")


@dataclass(frozen=True)
class NetworkSpec:
    kind: str
    input_shape: tuple
    encoder: tuple
    decoder: tuple
    head: tuple = ()
    num_classes: int | None = None

    def section(self, name) -> tuple:
        return getattr(self, name)

    def shapes(self) -> dict:
        """Output shape of every layer, keyed ``section.index``."""
        out = {}
        shape = tuple(self.input_shape)
        for i, layer in enumerate(self.encoder):
            shape = layer.output_shape(shape)
            out[f"encoder.{i}"] = shape
        latent = shape
        for i, layer in enumerate(self.decoder):
            shape = layer.output_shape(shape)
            out[f"decoder.{i}"] = shape
        if shape != tuple(self.input_shape):
            raise ValueError(f"decoder output {shape} != input {self.input_shape}")
        shape = latent
        for i, layer in enumerate(self.head):
            shape = layer.output_shape(shape)
            out[f"head.{i}"] = shape
        return out

    @property
    def latent_shape(self) -> tuple:
        return self.shapes()[f"encoder.{len(self.encoder) - 1}"]

    def to_dict(self) -> dict:
        def enc(layers):
            return [{"type": type(l).__name__, **l.__dict__} for l in layers]

        return {
            "kind": self.kind,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            **{s: enc(self.section(s)) for s in SECTIONS},
        }

    @classmethod
    def from_dict(cls, d) -> "NetworkSpec":
        def dec(items):
            return tuple(LAYER_TYPES[it["type"]](**{k: v for k, v in it.items() if k != "type"})
                         for it in items)

        return cls(
            kind=d["kind"],
            input_shape=tuple(d["input_shape"]),
            num_classes=d["num_classes"],
            **{s: dec(d[s]) for s in SECTIONS},
        )


def build_architecture(kind: str, input_shape=(28, 28, 1), num_classes: int = 2) -> NetworkSpec:
    kind = kind.upper()
    if kind not in ("CAE", "RAE"):
        raise ValueError(f"unknown architecture {kind!r}")
    h, w, c = input_shape
    if h % 2 or w % 2:
        raise ValueError(f"input {h}x{w} is not divisible by the 2x2 pool factor")
    if c != 1:
        raise ValueError("only single-channel inputs are supported")
    encoder = (Conv3x3(3), MaxPool2x2(), Conv3x3(3))
    decoder = (Conv3x3(3), Upsample2x2(), Conv3x3(c))
    head = ()
    if kind == "CAE":
        head = (
            Flatten(),
            Dropout(0.25),
            Dense(128, "sigmoid"),
            Dropout(0.5),
            Dense(num_classes, "linear"),
            Softmax(),
        )
    spec = NetworkSpec(kind, tuple(input_shape), encoder, decoder, head,
                       num_classes if kind == "CAE" else None)
    spec.shapes()
    return spec


@dataclass
class NetworkParams:
    spec: NetworkSpec
    weights: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.weights.values())).dtype

    def layer_params(self, key) -> dict:
        prefix = key + "."
        return {k[len(prefix):]: v for k, v in self.weights.items() if k.startswith(prefix)}

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.spec, {k: v.copy() for k, v in self.weights.items()})

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.weights.values())


def init_params(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> NetworkParams:
    rng = np.random.default_rng(seed)
    weights = {}
    shapes = spec.shapes()
    for section in SECTIONS:
        layers = spec.section(section)
        for i, layer in enumerate(layers):
            key = f"{section}.{i}"
            if i > 0:
                in_shape = shapes[f"{section}.{i - 1}"]
            elif section == "encoder":
                in_shape = tuple(spec.input_shape)
            else:
                in_shape = spec.latent_shape
            for name, arr in layer.init_params(in_shape, rng, dtype).items():
                weights[f"{key}.{name}"] = arr
    return NetworkParams(spec, weights)


@dataclass
class ActivationTrace:
    mode: str
    inputs: np.ndarray
    latent: np.ndarray
    reconstruction: np.ndarray
    probs: np.ndarray | None
    caches: dict


def forward(params: NetworkParams, batch, mode: str = "eval", rng_seed=None) -> ActivationTrace:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    spec = params.spec
    x = np.asarray(batch, dtype=params.dtype)
    if x.shape[1:] != tuple(spec.input_shape):
        raise ValueError(f"batch shape {x.shape[1:]} does not match input {spec.input_shape}")
    train = mode == "train"
    rng = np.random.default_rng(rng_seed) if train else None
    caches = {}

    def run(section, h):
        for i, layer in enumerate(spec.section(section)):
            key = f"{section}.{i}"
            h, caches[key] = layer.forward(params.layer_params(key), h, train, rng)
        return h

    z = run("encoder", x)
    recon = run("decoder", z)
    probs = run("head", z) if spec.head else None
    return ActivationTrace(mode, x, z, recon, probs, caches)


def l1_reconstruction_error(x, x_prime) -> np.ndarray | float:
    """Mean absolute difference per sample (scalar for unbatched input)."""
    x = np.asarray(x, dtype=np.float64)
    x_prime = np.asarray(x_prime, dtype=np.float64)
    if x.shape != x_prime.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_prime.shape}")
    if x.ndim <= 1:
        return float(np.mean(np.abs(x - x_prime)))
    return np.abs(x - x_prime).reshape(x.shape[0], -1).mean(axis=1)


def label_to_index(labels) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.isin(labels, (-1, 1)).all():
        raise ValueError("labels must be -1 or +1")
    return (labels > 0).astype(np.int64)


def cross_entropy(probs, label) -> np.ndarray | float:
    """-log p(true class), probability floored at 1e-12; label in {-1, +1}."""
    probs = np.asarray(probs, dtype=np.float64)
    idx = label_to_index(label)
    if probs.ndim == 1:
        return float(-np.log(max(probs[int(idx)], PROB_FLOOR)))
    p = probs[np.arange(probs.shape[0]), idx]
    return -np.log(np.maximum(p, PROB_FLOOR))


def reconstruction_loss(x, x_prime, kind="l1") -> np.ndarray:
    """Per-sample training reconstruction loss: mean |d| ("l1") or mean d^2 ("l2")."""
    if kind == "l1":
        return l1_reconstruction_error(x, x_prime)
    if kind == "l2":
        diff = np.asarray(x, dtype=np.float64) - np.asarray(x_prime, dtype=np.float64)
        return (diff ** 2).reshape(diff.shape[0], -1).mean(axis=1)
    raise ValueError(f"unknown reconstruction loss {kind!r}")


def joint_loss(trace: ActivationTrace, labels=None, loss_weights=(1.0, 1.0),
               recon_loss="l1") -> float:
    w_r, w_c = loss_weights
    total = w_r * float(np.mean(reconstruction_loss(trace.inputs, trace.reconstruction, recon_loss)))
    if trace.probs is not None and w_c != 0:
        total += w_c * float(np.mean(cross_entropy(trace.probs, labels)))
    return total


def backward(params: NetworkParams, trace: ActivationTrace, labels=None,
             loss_weights=(1.0, 1.0), recon_loss="l1") -> dict:
    """Gradients of ``w_r * mean recon loss + w_c * mean CE`` over the batch."""
    spec = params.spec
    w_r, w_c = loss_weights
    x, recon = trace.inputs, trace.reconstruction
    n = x.shape[0]
    d = recon[0].size
    grads = {k: np.zeros_like(v) for k, v in params.weights.items()}

    def run_back(section, dout):
        layers = spec.section(section)
        for i in reversed(range(len(layers))):
            key = f"{section}.{i}"
            dout, g = layers[i].backward(params.layer_params(key), trace.caches[key], dout)
            for name, arr in g.items():
                grads[f"{key}.{name}"] += arr
        return dout

    if recon_loss == "l1":
        drecon = (w_r / (n * d)) * np.sign(recon - x)
    elif recon_loss == "l2":
        drecon = (2.0 * w_r / (n * d)) * (recon - x)
    else:
        raise ValueError(f"unknown reconstruction loss {recon_loss!r}")
    dz = run_back("decoder", drecon.astype(recon.dtype))
    if spec.head:
        idx = label_to_index(labels)
        p = trace.probs
        dprobs = np.zeros_like(p)
        picked = p[np.arange(n), idx]
        # floor clamps the gradient exactly where the loss is clamped
        dprobs[np.arange(n), idx] = np.where(picked > PROB_FLOOR, -w_c / (n * picked), 0.0)
        dz = dz + run_back("head", dprobs)
    run_back("encoder", dz)
    return grads


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    learning_rate: float = 1e-3
    rng_seed: int = 0
    recon_loss: str = "l2"

    def __post_init__(self):
        if self.recon_loss not in ("l1", "l2"):
            raise ValueError(f"unknown reconstruction loss {self.recon_loss!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def train_network(params: NetworkParams, X, labels=None, cfg: TrainConfig = TrainConfig(),
                  loss_weights=(1.0, 1.0)):
    """Mini-batch Adam on the joint loss. Returns ``(params, history)``."""
    X = np.asarray(X, dtype=params.dtype)
    n = X.shape[0]
    if params.spec.head and labels is None:
        raise ValueError("CAE training needs labels")
    labels = None if labels is None else np.asarray(labels)
    rng = np.random.default_rng(cfg.rng_seed)
    state = AdamState.zeros_like(params.weights, lr=cfg.learning_rate)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            yb = None if labels is None else labels[idx]
            trace = forward(params, X[idx], "train", rng_seed=int(rng.integers(2**63)))
            total += joint_loss(trace, yb, loss_weights, cfg.recon_loss) * len(idx)
            grads = backward(params, trace, yb, loss_weights, cfg.recon_loss)
            weights, state = adam_step(params.weights, grads, state)
            params = NetworkParams(params.spec, weights)
        history.append(total / n)
    return params, history


def predict_batched(params: NetworkParams, X, batch_size=512):
    """Eval-mode reconstructions and class probabilities for a whole array."""
    recon, probs = [], []
    for start in range(0, len(X), batch_size):
        tr = forward(params, X[start:start + batch_size], "eval")
        recon.append(tr.reconstruction)
        if tr.probs is not None:
            probs.append(tr.probs)
    recon = np.concatenate(recon) if recon else np.empty((0,) + tuple(params.spec.input_shape))
    return recon, (np.concatenate(probs) if probs else None)


def save_params(params: NetworkParams, path) -> None:
    header = json.dumps({"version": CHECKPOINT_VERSION, "spec": params.spec.to_dict(),
                         "order": list(params.weights)})
    np.savez(path, __header__=np.array(header), **params.weights)


def load_params(path) -> NetworkParams:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        spec = NetworkSpec.from_dict(header["spec"])
        weights = {k: z[k] for k in header["order"]}
    return NetworkParams(spec, weights)


__all__ = [
    "ActivationTrace", "NetworkParams", "NetworkSpec", "TrainConfig", "Layer",
    "backward", "build_architecture", "cross_entropy", "forward", "init_params",
    "joint_loss", "l1_reconstruction_error", "load_params", "predict_batched",
    "save_params", "train_network",
]
