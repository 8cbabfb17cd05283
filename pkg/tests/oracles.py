"""Slow reference solvers used only by tests."""
import numpy as np

from poisonguard.svm import train_svm


def _project_box_hyperplane(v, y, C):
    """Euclidean projection onto {0 <= a <= C, a.y = 0} by bisection on the multiplier."""
    lo, hi = -1.0, 1.0
    f = lambda t: np.clip(v - t * y, 0.0, C) @ y
    while f(lo) < 0:
        lo *= 2
    while f(hi) > 0:
        hi *= 2
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            lo = mid
        else:
            hi = mid
    return np.clip(v - 0.5 * (lo + hi) * y, 0.0, C)


def projected_gradient_dual(X, y, C=1.0, iters=1_000_000, tol=1e-12):
    """Maximize sum(a) - 1/2 a'Qa over the SVM dual polytope.

    Accelerated projected gradient (step 1/L, L the largest eigenvalue of Q)
    with adaptive restart; stops once a plain projected step leaves the iterate fixed.
    """
    y = y.astype(np.float64)
    Q = (y[:, None] * X) @ (y[:, None] * X).T
    step = 1.0 / max(np.linalg.eigvalsh(Q)[-1], 1e-12)
    obj = lambda a: a.sum() - 0.5 * a @ Q @ a
    a = z = np.zeros(len(y))
    t = 1.0
    pg_step = lambda v: _project_box_hyperplane(v + step * (1.0 - Q @ v), y, C)
    for k in range(iters):
        nxt = pg_step(z)
        if t > 1.0 and obj(nxt) < obj(a):  # momentum overshot: restart from the last iterate
            t, z = 1.0, a
            continue
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        z = nxt + ((t - 1.0) / t_next) * (nxt - a)
        a, t = nxt, t_next
        if k % 50 == 0 and np.max(np.abs(pg_step(a) - a)) < tol:
            break
    return a


def retrain_fd_gradient(train_X, train_y, xc, yc, X_val, y_val, cfg, h=1e-3):
    """Central differences of the validation hinge sum, retraining the SVM at each probe."""
    def objective(x):
        m = train_svm(np.vstack([train_X, x]), np.append(train_y, yc), cfg)
        return np.maximum(0.0, 1.0 - y_val * m.decision_function(X_val)).sum()

    g = np.zeros_like(xc)
    for k in range(len(xc)):
        e = np.zeros_like(xc)
        e[k] = h
        g[k] = (objective(xc + e) - objective(xc - e)) / (2 * h)
    return g
