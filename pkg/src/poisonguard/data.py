"""Dataset ingestion, binary tasks, synthetic fixtures and periodic-update rounds."""
from __future__ import annotations

import gzip
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
DATA_ROOT_ENV = "POISONGUARD_DATA"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


@dataclass(frozen=True)
class LabeledSample:
    features: np.ndarray
    label: int
    poison_flag: bool = False
    origin_id: int = -1


@dataclass
class SampleSet:
    """Column store of samples; ``features`` is (n, *feature_shape) float32 in [0, 1]."""

    features: np.ndarray
    labels: np.ndarray
    poison: np.ndarray | None = None
    origin: np.ndarray | None = None
    kinds: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.labels)
        if self.features.shape[0] != n:
            raise ValueError("features and labels disagree in length")
        if n and not np.isin(self.labels, (-1, 1)).all():
            raise ValueError("labels must be -1 or +1")
        self.poison = np.zeros(n, bool) if self.poison is None else np.asarray(self.poison, bool)
        self.origin = (np.arange(n, dtype=np.int64) if self.origin is None
                       else np.asarray(self.origin, dtype=np.int64))
        if self.kinds is None:
            self.kinds = np.where(self.poison, "poison", "clean").astype("<U8")
        else:
            self.kinds = np.asarray(self.kinds, dtype="<U8")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return LabeledSample(self.features[i], int(self.labels[i]),
                                 bool(self.poison[i]), int(self.origin[i]))
        return SampleSet(self.features[i], self.labels[i], self.poison[i],
                         self.origin[i], self.kinds[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def feature_shape(self) -> tuple:
        return self.features.shape[1:]

    def flat(self) -> np.ndarray:
        return self.features.reshape(len(self), -1)

    @classmethod
    def empty(cls, feature_shape) -> "SampleSet":
        return cls(np.zeros((0, *feature_shape), np.float32), np.zeros(0, np.int64))

    @classmethod
    def concat(cls, sets) -> "SampleSet":
        sets = list(sets)
        return cls(
            np.concatenate([s.features for s in sets]),
            np.concatenate([s.labels for s in sets]),
            np.concatenate([s.poison for s in sets]),
            np.concatenate([s.origin for s in sets]),
            np.concatenate([s.kinds for s in sets]),
        )


@dataclass
class RawDataset:
    images: np.ndarray  # (n, H, W) uint8
    labels: np.ndarray  # (n,) class ids

    @property
    def features(self) -> np.ndarray:
        return (self.images.astype(np.float32) / 255.0)[..., None]


@dataclass
class BinaryTask:
    positive_class: int
    negative_class: int
    samples: SampleSet
    name: str = ""


@dataclass
class RoundBuffer:
    round_index: int
    train: SampleSet
    validation: SampleSet
    test: SampleSet
    poisons: SampleSet | None = None

    @property
    def contaminated_train(self) -> SampleSet:
        if self.poisons is None or len(self.poisons) == 0:
            return self.train
        return SampleSet.concat([self.train, self.poisons])


@dataclass
class ExperimentDataset:
    rounds: list
    detector_training_rounds: list
    evaluation_rounds: list
    sampling: dict = field(default_factory=dict)


# ---------------------------------------------------------------- IDX files

def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path, expected_magic, ndim):
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: header truncated")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if len(raw) < 4 + 4 * ndim:
        raise IdxTruncatedError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    body = raw[4 + 4 * ndim:]
    need = int(np.prod(dims))
    if len(body) < need:
        raise IdxTruncatedError(f"{path}: expected {need} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=need).reshape(dims)


def load_idx(images_path, labels_path) -> RawDataset:
    images = _read_idx(images_path, IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, LABEL_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    return RawDataset(images.copy(), labels.astype(np.int64))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IMAGE_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", LABEL_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def bundled_mnist() -> RawDataset:
    """The 5000-image MNIST subset shipped inside ``mlxtend`` (500 per digit)."""
    try:
        from importlib.resources import files
        path = files("mlxtend.data") / "data" / "mnist_5k.csv.gz"
    except ModuleNotFoundError as exc:
        raise FileNotFoundError(
            "no MNIST IDX files found and mlxtend is not installed "
            "(pip install 'artifact[mnist]')") from exc
    with gzip.open(str(path), "rt") as f:
        table = np.loadtxt(f, delimiter=",", dtype=np.float64)
    images = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    return RawDataset(images, table[:, -1].astype(np.int64))


def load_mnist(root=None, split="train") -> RawDataset:
    """Load MNIST IDX files from ``root`` (or $POISONGUARD_DATA), else the bundled subset."""
    root = root or os.environ.get(DATA_ROOT_ENV)
    if root:
        img_name, lbl_name = MNIST_FILES[split]
        for suffix in ("", ".gz"):
            img = Path(root) / (img_name + suffix)
            lbl = Path(root) / (lbl_name + suffix)
            if img.exists() and lbl.exists():
                return load_idx(img, lbl)
        log.warning("no %s IDX files under %s; falling back to bundled subset", split, root)
    return bundled_mnist()


# ------------------------------------------------------------ binary tasks

def make_binary_task(raw: RawDataset, pos_class: int, neg_class: int, rng_seed: int = 0) -> BinaryTask:
    if pos_class == neg_class:
        raise ValueError("positive and negative class must differ")
    for c in (pos_class, neg_class):
        if not np.any(raw.labels == c):
            raise ValueError(f"class {c} not present in dataset")
    keep = np.flatnonzero((raw.labels == pos_class) | (raw.labels == neg_class))
    order = keep[np.random.default_rng(rng_seed).permutation(len(keep))]
    labels = np.where(raw.labels[order] == pos_class, 1, -1)
    feats = raw.images[order].astype(np.float32) / 255.0
    if feats.ndim == 3:
        feats = feats[..., None]
    samples = SampleSet(feats, labels, origin=order)
    return BinaryTask(pos_class, neg_class, samples, f"{pos_class}-{neg_class}")


def synth_blobs(n_per_class: int, dim: int, center_distance: float, spread: float,
                rng_seed: int = 0) -> BinaryTask:
    """Two isotropic Gaussian clouds whose centers are ``center_distance`` apart."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    rng = np.random.default_rng(rng_seed)
    offset = 0.5 * center_distance / np.sqrt(dim)
    centers = {1: np.full(dim, 0.5 + offset), -1: np.full(dim, 0.5 - offset)}
    feats, labels = [], []
    for lab in (1, -1):
        feats.append(centers[lab] + spread * rng.standard_normal((n_per_class, dim)))
        labels.append(np.full(n_per_class, lab))
    feats = np.clip(np.concatenate(feats), 0.0, 1.0)
    labels = np.concatenate(labels)
    order = rng.permutation(len(labels))
    return BinaryTask(1, -1, SampleSet(feats[order], labels[order], origin=order), "blobs")


def _stroke_template(rng, size):
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    img = np.zeros((size, size))
    pts = 0.2 + 0.6 * rng.random((4, 2))
    for a, b in zip(pts[:-1], pts[1:]):
        for t in np.linspace(0.0, 1.0, 12):
            cy, cx = a + t * (b - a)
            img = np.maximum(img, np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.045 ** 2)))
    return img


def synth_images(n_per_class: int, size: int = 28, rng_seed: int = 0,
                 shift: int = 2, noise: float = 0.05, name: str = "synthetic") -> BinaryTask:
    """Image-like two-class task: jittered copies of two random stroke templates.

    Stands in for an image dataset when none is available on disk.
    """
    if size % 2:
        raise ValueError("size must be even")
    rng = np.random.default_rng(rng_seed)
    templates = {1: _stroke_template(rng, size), -1: _stroke_template(rng, size)}
    feats, labels = [], []
    for lab in (1, -1):
        for _ in range(n_per_class):
            dy, dx = rng.integers(-shift, shift + 1, size=2)
            img = np.roll(templates[lab], (dy, dx), axis=(0, 1))
            img = img * rng.uniform(0.7, 1.0) + noise * rng.standard_normal(img.shape)
            feats.append(np.clip(img, 0.0, 1.0))
            labels.append(lab)
    feats = np.asarray(feats, dtype=np.float32)[..., None]
    labels = np.asarray(labels)
    order = rng.permutation(len(labels))
    return BinaryTask(1, -1, SampleSet(feats[order], labels[order], origin=order), name)


# ------------------------------------------------------------------ rounds

def _stratified_counts(size, frac_pos):
    k_pos = int(round(size * frac_pos))
    return {1: k_pos, -1: size - k_pos}


def build_rounds(task: BinaryTask, n_rounds: int = 60, split_sizes=(100, 200, 200),
                 rng_seed: int = 0, n_eval: int = 10, allow_replacement: bool = True
                 ) -> ExperimentDataset:
    """Draw ``n_rounds`` stratified buffers of train/validation/test splits.

    Samples are drawn without replacement across rounds while each class pool
    lasts; afterwards the pool is reshuffled (sampling with replacement across
    rounds) and the round at which that happened is recorded.  Within a round
    all splits are disjoint.
    """
    if n_rounds < 1:
        raise ValueError("n_rounds must be >= 1")
    s = task.samples
    rng = np.random.default_rng(rng_seed)
    frac_pos = float(np.mean(s.labels > 0))
    pools = {lab: np.flatnonzero(s.labels == lab) for lab in (1, -1)}
    per_split = [_stratified_counts(size, frac_pos) for size in split_sizes]
    per_round = {lab: sum(c[lab] for c in per_split) for lab in (1, -1)}
    for lab in (1, -1):
        if per_round[lab] > len(pools[lab]):
            raise ValueError(f"class {lab} has {len(pools[lab])} samples; a round needs {per_round[lab]}")

    queues = {lab: list(rng.permutation(pools[lab])) for lab in (1, -1)}
    refilled_at = None
    rounds = []
    for r in range(n_rounds):
        taken = {}
        for lab in (1, -1):
            need = per_round[lab]
            if len(queues[lab]) < need:
                if not allow_replacement:
                    raise ValueError(f"pool exhausted at round {r} and replacement is disabled")
                if refilled_at is None:
                    refilled_at = r
                # leftovers go first so no sample is skipped; refill excludes them
                leftover = set(queues[lab])
                fresh = [i for i in rng.permutation(pools[lab]) if i not in leftover]
                queues[lab].extend(fresh)
            taken[lab], queues[lab] = queues[lab][:need], queues[lab][need:]
        splits, cursor = [], {1: 0, -1: 0}
        for counts in per_split:
            idx = []
            for lab in (1, -1):
                idx.extend(taken[lab][cursor[lab]:cursor[lab] + counts[lab]])
                cursor[lab] += counts[lab]
            idx = np.asarray(idx, dtype=np.int64)
            splits.append(s[idx[rng.permutation(len(idx))]])
        rounds.append(RoundBuffer(r, *splits))

    n_eval = min(n_eval, n_rounds)
    train_idx = list(range(n_rounds - n_eval))
    if not train_idx:
        log.warning("build_rounds: no detector-training rounds (n_rounds=%d)", n_rounds)
    sampling = {
        "policy": "stratified; without replacement across rounds until a class pool is exhausted",
        "pool_size": len(s),
        "replacement_from_round": refilled_at,
    }
    return ExperimentDataset(rounds, train_idx, list(range(n_rounds - n_eval, n_rounds)), sampling)
