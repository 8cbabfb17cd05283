"""Poison generation against the linear SVM: flipping, optimal, semi-optimal, mixed."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import RoundBuffer, SampleSet
from .svm import SvmConfig, hinge_loss_sum, train_svm

KINDS = ("flip", "optimal", "semi", "mixed")
GRADIENTS = ("fixed_dual", "kkt")


@dataclass(frozen=True)
class AttackConfig:
    poison_rate: float = 0.10
    step_size: float = 0.1
    max_iters: int = 50
    improvement_tol: float = 1e-4
    rng_seed: int = 0
    svm: SvmConfig = field(default_factory=SvmConfig)
    gradient: str = "fixed_dual"
    # step halvings tried after a rejected step before the poison stops
    backtracks: int = 0

    def __post_init__(self):
        if self.gradient not in GRADIENTS:
            raise ValueError(f"unknown gradient {self.gradient!r}; expected one of {GRADIENTS}")
        if not 0.0 <= self.poison_rate <= 0.5:
            raise ValueError(f"poison_rate must be in [0, 0.5], got {self.poison_rate}")
        if self.step_size < 0:
            raise ValueError("step_size must be non-negative")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")

    def n_poisons(self, n_train: int) -> int:
        # guard against 0.3 * 100 = 30.000000000000004
        return int(math.ceil(self.poison_rate * n_train - 1e-9))


@dataclass
class PoisonSet:
    poisons: SampleSet
    provenance: list = field(default_factory=list)
    trajectories: list = field(default_factory=list)

    def __len__(self):
        return len(self.poisons)

    def to_json(self) -> dict:
        return {
            "n_poisons": len(self),
            "feature_shape": list(self.poisons.feature_shape),
            "poisons": [
                {
                    "kind": prov["kind"],
                    "source_origin_id": prov["source_origin_id"],
                    "label": int(self.poisons.labels[i]),
                    "features": np.round(self.poisons.flat()[i].astype(float), 7).tolist(),
                    "trajectory": [float(v) for v in self.trajectories[i]],
                }
                for i, prov in enumerate(self.provenance)
            ],
        }

    @classmethod
    def from_json(cls, d) -> "PoisonSet":
        shape = tuple(d["feature_shape"])
        items = d["poisons"]
        feats = np.array([it["features"] for it in items], dtype=np.float32).reshape(len(items), *shape)
        labels = np.array([it["label"] for it in items], dtype=np.int64)
        origin = np.array([it["source_origin_id"] for it in items], dtype=np.int64)
        kinds = np.array([it["kind"] for it in items])
        ps = SampleSet(feats, labels, np.ones(len(items), bool), origin, kinds)
        prov = [{"kind": it["kind"], "source_origin_id": it["source_origin_id"]} for it in items]
        return cls(ps, prov, [it["trajectory"] for it in items])

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f)


def _empty(train: SampleSet) -> PoisonSet:
    ps = SampleSet.empty(train.feature_shape)
    ps.poison = np.ones(0, bool)
    return PoisonSet(ps)


def _make_set(train, src, feats, labels, kind) -> SampleSet:
    n = len(src)
    return SampleSet(feats.reshape(n, *train.feature_shape), labels,
                     np.ones(n, bool), train.origin[src], np.full(n, kind))


def flip_attack(train: SampleSet, n_p: int, rng_seed: int = 0, exclude=()) -> PoisonSet:
    if n_p > len(train) - len(exclude):
        raise ValueError(f"cannot draw {n_p} poisons from {len(train)} samples")
    if n_p == 0:
        return _empty(train)
    rng = np.random.default_rng(rng_seed)
    pool = np.setdiff1d(np.arange(len(train)), np.asarray(exclude, dtype=np.int64))
    src = rng.choice(pool, n_p, replace=False)
    poisons = _make_set(train, src, train.features[src].copy(), -train.labels[src], "flip")
    prov = [{"kind": "flip", "source_origin_id": int(o)} for o in train.origin[src]]
    return PoisonSet(poisons, prov, [[] for _ in src])


def attack_gradient(model, X_val, y_val, alpha_c, y_c) -> np.ndarray:
    """Fixed-dual gradient of the validation hinge-loss sum w.r.t. a poison's features.

    With duals held constant, f(x_j) = sum_i alpha_i y_i <x_i, x_j> + b, so only
    validation points inside the hinge (1 - y_j f(x_j) > 0) contribute.
    """
    active = (1.0 - y_val * model.decision_function(X_val)) > 0
    return -alpha_c * y_c * (y_val[active] @ X_val[active])


def kkt_attack_gradient(model, X_train, y_train, c, X_val, y_val, eps=1e-6) -> np.ndarray:
    """Implicit gradient of the validation hinge-loss sum w.r.t. training point ``c``.

    Differentiates the margin conditions of the free support vectors and the
    equality constraint, so the free duals and the bias follow the poison.
    Bound duals are held fixed, which is exact while the active set is stable.
    """
    a, C = model.alpha, model.C
    y_c, a_c = y_train[c], a[c]
    free = np.flatnonzero((a > eps) & (a < C - eps))
    active = (1.0 - y_val * model.decision_function(X_val)) > 0
    Xa, ya = X_val[active], y_val[active]
    fixed_term = -a_c * y_c * (ya @ Xa)
    if len(free) == 0:
        return fixed_term
    XS, yS = X_train[free], y_train[free]
    n = len(free)
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = (yS[:, None] * XS) @ (yS[:, None] * XS).T
    M[:n, n] = yS
    M[n, :n] = yS
    R = np.zeros((n + 1, X_train.shape[1]))
    R[:n] = -yS[:, None] * (a_c * y_c * XS)
    own = np.flatnonzero(free == c)
    if own.size:
        R[own[0]] -= yS[own[0]] * model.weights
    sol = np.linalg.lstsq(M, R, rcond=None)[0]
    d_alpha, d_b = sol[:n], sol[n]
    coupling = (ya @ Xa @ XS.T) * yS
    return fixed_term - coupling @ d_alpha - ya.sum() * d_b


def _gradient_attack(train: SampleSet, validation: SampleSet, n_p: int, cfg: AttackConfig,
                     flip_labels: bool, kind: str, fixed: SampleSet | None = None,
                     exclude=()) -> PoisonSet:
    if n_p > len(train) - len(exclude):
        raise ValueError(f"cannot draw {n_p} poisons from {len(train)} samples")
    if n_p == 0:
        return _empty(train)
    if len(validation) == 0:
        raise ValueError("validation set is empty")
    rng = np.random.default_rng(cfg.rng_seed)
    pool = np.setdiff1d(np.arange(len(train)), np.asarray(exclude, dtype=np.int64))
    src = rng.choice(pool, n_p, replace=False)

    base_X, base_y = train.flat().astype(np.float64), train.labels.astype(np.float64)
    if fixed is not None and len(fixed):
        base_X = np.vstack([base_X, fixed.flat()])
        base_y = np.concatenate([base_y, fixed.labels])
    n_base = len(base_y)
    X_val = validation.flat().astype(np.float64)
    y_val = validation.labels.astype(np.float64)

    P = train.flat()[src].astype(np.float64)
    Py = train.labels[src].astype(np.float64) * (-1.0 if flip_labels else 1.0)
    y_all = np.concatenate([base_y, Py])
    trajectories = []
    for c in range(n_p):
        model = train_svm(np.vstack([base_X, P]), y_all, cfg.svm)
        loss = hinge_loss_sum(model, X_val, y_val)
        traj = [loss]
        for _ in range(cfg.max_iters):
            if cfg.gradient == "kkt":
                g = kkt_attack_gradient(model, np.vstack([base_X, P]), y_all, n_base + c, X_val, y_val)
            else:
                g = attack_gradient(model, X_val, y_val, model.alpha[n_base + c], Py[c])
            norm = np.linalg.norm(g)
            if norm == 0.0:
                break  # non-support-vector poison: no descent direction, stays put
            step = cfg.step_size
            for _ in range(cfg.backtracks + 1):
                cand = P.copy()
                cand[c] = np.clip(P[c] + step * g / norm, 0.0, 1.0)
                # features moved, labels did not: previous duals stay feasible
                cand_model = train_svm(np.vstack([base_X, cand]), y_all, cfg.svm, init_alpha=model.alpha)
                cand_loss = hinge_loss_sum(cand_model, X_val, y_val)
                if cand_loss - loss >= cfg.improvement_tol:
                    break
                step *= 0.5
            if cand_loss - loss < cfg.improvement_tol:
                break
            P, model, loss = cand, cand_model, cand_loss
            traj.append(loss)
        trajectories.append(traj)

    poisons = _make_set(train, src, P.astype(np.float32), Py.astype(np.int64), kind)
    prov = [{"kind": kind, "source_origin_id": int(o)} for o in train.origin[src]]
    return PoisonSet(poisons, prov, trajectories)


def optimal_attack(train, validation, n_p, cfg: AttackConfig = AttackConfig(), **kw) -> PoisonSet:
    return _gradient_attack(train, validation, n_p, cfg, True, "optimal", **kw)


def semi_optimal_attack(train, validation, n_p, cfg: AttackConfig = AttackConfig(), **kw) -> PoisonSet:
    return _gradient_attack(train, validation, n_p, cfg, False, "semi", **kw)


def mixed_counts(n_p: int) -> dict:
    base, rem = divmod(n_p, 3)
    return {"flip": base + (rem > 0), "optimal": base + (rem > 1), "semi": base}


def _merge(parts) -> PoisonSet:
    parts = [p for p in parts if len(p)]
    return PoisonSet(
        SampleSet.concat([p.poisons for p in parts]),
        [x for p in parts for x in p.provenance],
        [x for p in parts for x in p.trajectories],
    )


def mixed_attack(train, validation, n_p, cfg: AttackConfig = AttackConfig()) -> PoisonSet:
    """One third of each kind; later kinds are optimized against earlier poisons."""
    counts = mixed_counts(n_p)
    if n_p == 0:
        return _empty(train)
    rng = np.random.default_rng(cfg.rng_seed)
    seeds = rng.integers(2**31, size=3)
    flips = flip_attack(train, counts["flip"], int(seeds[0]))
    used = np.flatnonzero(np.isin(train.origin, [p["source_origin_id"] for p in flips.provenance]))
    opt = optimal_attack(train, validation, counts["optimal"], replace(cfg, rng_seed=int(seeds[1])),
                         fixed=flips.poisons, exclude=used)
    fixed = SampleSet.concat([flips.poisons, opt.poisons]) if len(opt) else flips.poisons
    used = np.flatnonzero(np.isin(train.origin, [p["source_origin_id"]
                                                 for p in flips.provenance + opt.provenance]))
    semi = semi_optimal_attack(train, validation, counts["semi"], replace(cfg, rng_seed=int(seeds[2])),
                               fixed=fixed, exclude=used)
    return _merge([flips, opt, semi])


def generate_poisons(kind: str, train: SampleSet, validation: SampleSet, n_p: int,
                     cfg: AttackConfig = AttackConfig()) -> PoisonSet:
    if kind == "flip":
        return flip_attack(train, n_p, cfg.rng_seed)
    if kind == "optimal":
        return optimal_attack(train, validation, n_p, cfg)
    if kind in ("semi", "semi_optimal"):
        return semi_optimal_attack(train, validation, n_p, cfg)
    if kind == "mixed":
        return mixed_attack(train, validation, n_p, cfg)
    raise ValueError(f"unknown attack kind {kind!r}; expected one of {KINDS}")


def poison_round(round_: RoundBuffer, kind: str, cfg: AttackConfig = AttackConfig()) -> RoundBuffer:
    """Attach ``ceil(rate * |train|)`` poisons of ``kind`` to the round's training split."""
    n_p = cfg.n_poisons(len(round_.train))
    if n_p == 0:
        return round_
    ps = generate_poisons(kind, round_.train, round_.validation, n_p, cfg)
    return RoundBuffer(round_.round_index, round_.train, round_.validation, round_.test, ps.poisons)


def config_dict(cfg: AttackConfig) -> dict:
    return asdict(cfg)
