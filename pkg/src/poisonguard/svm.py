"""Linear soft-margin SVM trained in the dual.

The solver is an SMO-style pairwise coordinate method with second-order
working-set selection (Fan, Chen & Lin 2005).  Dual coefficients are kept on
the model because the optimal poisoning attack differentiates through them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_TAU = 1e-12


@dataclass(frozen=True)
class SvmConfig:
    C: float = 1.0
    tolerance: float = 1e-3
    max_passes: int = 100_000
    rng_seed: int = 0

    def __post_init__(self):
        if self.C <= 0:
            raise ValueError(f"C must be positive, got {self.C}")
        if self.tolerance <= 0:
            raise ValueError(f"tolerance must be positive, got {self.tolerance}")
        if self.max_passes < 1:
            raise ValueError("max_passes must be >= 1")


@dataclass
class SvmModel:
    weights: np.ndarray
    bias: float
    alpha: np.ndarray
    C: float
    iterations: int = 0
    converged: bool = True
    gap: float = 0.0
    meta: dict = field(default_factory=dict)

    def decision_function(self, X) -> np.ndarray:
        X = _as_matrix(X)
        if X.shape[1] != self.weights.shape[0]:
            raise ValueError(
                f"feature length {X.shape[1]} does not match model ({self.weights.shape[0]})"
            )
        return X @ self.weights + self.bias

    def predict(self, X) -> np.ndarray:
        return np.where(self.decision_function(X) >= 0.0, 1, -1)


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        return X[None, :]
    return X.reshape(X.shape[0], -1)


def _check_labels(y) -> np.ndarray:
    y = np.asarray(y)
    if not np.isin(y, (-1, 1)).all():
        raise ValueError("labels must be -1 or +1")
    return y.astype(np.float64)


def dual_objective(alpha, X, y) -> float:
    """Dual value sum(alpha) - 1/2 ||sum_i alpha_i y_i x_i||^2 (to be maximized)."""
    X = _as_matrix(X)
    v = (np.asarray(alpha) * np.asarray(y, dtype=np.float64)) @ X
    return float(np.sum(alpha) - 0.5 * v @ v)


def train_svm(X, y, cfg: SvmConfig | None = None, init_alpha=None) -> SvmModel:
    """Train a linear SVM; ``init_alpha`` warm-starts from a feasible dual point."""
    cfg = cfg or SvmConfig()
    X = _as_matrix(X)
    y = _check_labels(y)
    n = X.shape[0]
    if n != y.shape[0]:
        raise ValueError("X and y lengths differ")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise ValueError("SVM training needs both labels present")
    C = float(cfg.C)

    # seeded permutation fixes the tie-breaking order of working-set selection
    perm = np.random.default_rng(cfg.rng_seed).permutation(n)
    Xp, yp = X[perm], y[perm]
    K = Xp @ Xp.T
    Q = K * np.outer(yp, yp)
    diag = np.diag(Q).copy()

    if init_alpha is None:
        a = np.zeros(n)
    else:
        a = np.clip(np.asarray(init_alpha, dtype=np.float64)[perm], 0.0, C)
        if abs(a @ yp) > 1e-9:
            a = np.zeros(n)
    G = Q @ a - 1.0

    it = 0
    gap = np.inf
    converged = False
    while it < cfg.max_passes:
        ygrad = -yp * G
        up = ((yp > 0) & (a < C)) | ((yp < 0) & (a > 0))
        low = ((yp > 0) & (a > 0)) | ((yp < 0) & (a < C))
        if not up.any() or not low.any():
            converged = True
            gap = 0.0
            break
        i = int(np.argmax(np.where(up, ygrad, -np.inf)))
        m_val = ygrad[i]
        M_val = np.min(np.where(low, ygrad, np.inf))
        gap = m_val - M_val
        if gap <= cfg.tolerance:
            converged = True
            break
        # second-order choice of j among violating low candidates
        b = m_val - ygrad
        cand = low & (b > 0)
        quad = diag[i] + diag - 2.0 * yp[i] * yp * Q[i]
        quad = np.where(quad > 0, quad, _TAU)
        obj = np.where(cand, -(b * b) / quad, np.inf)
        j = int(np.argmin(obj))

        yi, yj = yp[i], yp[j]
        ai_old, aj_old = a[i], a[j]
        if yi != yj:
            qd = diag[i] + diag[j] + 2.0 * Q[i, j]
            if qd <= 0:
                qd = _TAU
            delta = (-G[i] - G[j]) / qd
            diff = a[i] - a[j]
            a[i] += delta
            a[j] += delta
            if diff > 0:
                if a[j] < 0:
                    a[j] = 0.0
                    a[i] = diff
            else:
                if a[i] < 0:
                    a[i] = 0.0
                    a[j] = -diff
            if diff > 0:
                if a[i] > C:
                    a[i] = C
                    a[j] = C - diff
            else:
                if a[j] > C:
                    a[j] = C
                    a[i] = C + diff
        else:
            qd = diag[i] + diag[j] - 2.0 * Q[i, j]
            if qd <= 0:
                qd = _TAU
            delta = (G[i] - G[j]) / qd
            s = a[i] + a[j]
            a[i] -= delta
            a[j] += delta
            if s > C:
                if a[i] > C:
                    a[i] = C
                    a[j] = s - C
            else:
                if a[j] < 0:
                    a[j] = 0.0
                    a[i] = s
            if s > C:
                if a[j] > C:
                    a[j] = C
                    a[i] = s - C
            else:
                if a[i] < 0:
                    a[i] = 0.0
                    a[j] = s
        dai, daj = a[i] - ai_old, a[j] - aj_old
        G += Q[:, i] * dai + Q[:, j] * daj
        it += 1

    bias = _bias(a, G, yp, C)
    alpha = np.empty(n)
    alpha[perm] = a
    w = (alpha * y) @ X
    return SvmModel(
        weights=w,
        bias=bias,
        alpha=alpha,
        C=C,
        iterations=it,
        converged=converged,
        gap=float(gap),
    )


def _bias(a, G, y, C) -> float:
    yG = y * G
    free = (a > 0) & (a < C)
    if free.any():
        rho = float(np.mean(yG[free]))
    else:
        ub, lb = np.inf, -np.inf
        for t in range(len(a)):
            if (a[t] >= C and y[t] < 0) or (a[t] <= 0 and y[t] > 0):
                ub = min(ub, yG[t])
            else:
                lb = max(lb, yG[t])
        rho = 0.5 * (ub + lb)
    return -rho


def kkt_violations(model: SvmModel, X, y) -> np.ndarray:
    """Per-sample violation of the soft-margin KKT conditions."""
    y = _check_labels(y)
    margin = y * model.decision_function(X)
    a, C = model.alpha, model.C
    eps = 1e-8 * C
    at_zero = a <= eps
    at_c = a >= C - eps
    viol = np.abs(margin - 1.0)
    viol = np.where(at_zero, np.maximum(0.0, 1.0 - margin), viol)
    viol = np.where(at_c, np.maximum(0.0, margin - 1.0), viol)
    return viol


def decision_value(model: SvmModel, x) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    return float(model.decision_function(x[None, :])[0])


def predict(model: SvmModel, x) -> int:
    return 1 if decision_value(model, x) >= 0.0 else -1


def accuracy(model: SvmModel, X, y) -> float:
    y = _check_labels(y)
    if y.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(model.predict(X) == y))


def hinge_loss_sum(model: SvmModel, X, y) -> float:
    y = _check_labels(y)
    return float(np.maximum(0.0, 1.0 - y * model.decision_function(X)).sum())


def save_model(model: SvmModel, path) -> None:
    np.savez(
        path,
        weights=model.weights,
        bias=np.array(model.bias),
        alpha=model.alpha,
        C=np.array(model.C),
    )


def load_model(path) -> SvmModel:
    with np.load(path) as z:
        return SvmModel(
            weights=z["weights"],
            bias=float(z["bias"]),
            alpha=z["alpha"],
            C=float(z["C"]),
        )
