import numpy as np
import pytest

from poisonguard.data import synth_blobs
from poisonguard.svm import (
    SvmConfig,
    SvmModel,
    accuracy,
    decision_value,
    dual_objective,
    hinge_loss_sum,
    kkt_violations,
    load_model,
    predict,
    save_model,
    train_svm,
)

from .oracles import projected_gradient_dual


def _random_instance(seed, n=16, d=3):
    rng = np.random.default_rng(seed)
    X = rng.random((n, d))
    y = np.where(rng.random(n) > 0.5, 1, -1)
    y[0], y[1] = 1, -1
    return X, y


@pytest.mark.parametrize("seed", range(6))
def test_dual_matches_projected_gradient_oracle(seed):
    X, y = _random_instance(seed, n=12 + seed)
    model = train_svm(X, y, SvmConfig(tolerance=1e-6))
    ref = projected_gradient_dual(X, y, 1.0)
    assert abs(dual_objective(model.alpha, X, y) - dual_objective(ref, X, y)) <= 1e-4


def test_separable_blobs_accuracy_and_kkt():
    s = synth_blobs(50, 2, 0.8, 0.05, rng_seed=0).samples
    X, y = s.flat(), s.labels
    model = train_svm(X, y)
    assert accuracy(model, X, y) == 1.0
    assert kkt_violations(model, X, y).max() <= 1e-3


def test_dual_invariants():
    X, y = _random_instance(3, n=40, d=5)
    model = train_svm(X, y)
    assert (model.alpha >= 0).all() and (model.alpha <= model.C).all()
    assert abs(model.alpha @ y) <= 1e-6
    np.testing.assert_allclose(model.weights, (model.alpha * y) @ X, atol=1e-6)


def test_free_support_vectors_on_margin():
    X, y = _random_instance(5, n=40, d=5)
    model = train_svm(X, y)
    free = (model.alpha > 1e-6) & (model.alpha < model.C - 1e-6)
    assert free.any()
    f = model.decision_function(X[free])
    assert np.abs(f - y[free]).max() <= 1e-2


def test_single_class_rejected():
    with pytest.raises(ValueError):
        train_svm(np.random.default_rng(0).random((5, 2)), np.ones(5))


def test_bit_reproducible():
    X, y = _random_instance(7, n=60, d=8)
    a, b = train_svm(X, y, SvmConfig(rng_seed=3)), train_svm(X, y, SvmConfig(rng_seed=3))
    assert np.array_equal(a.alpha, b.alpha) and a.bias == b.bias


def test_duplicated_dataset_same_signs():
    X, y = _random_instance(8, n=30, d=4)
    a = train_svm(X, y, SvmConfig(tolerance=1e-6))
    # each copy carries half the slack weight, so the primal is unchanged
    b = train_svm(np.vstack([X, X]), np.concatenate([y, y]), SvmConfig(C=0.5, tolerance=1e-6))
    probe = np.random.default_rng(0).random((200, 4))
    assert np.array_equal(a.predict(probe), b.predict(probe))


def test_far_correct_point_leaves_model_unchanged():
    s = synth_blobs(30, 2, 0.8, 0.05, rng_seed=1).samples
    X, y = s.flat(), s.labels
    a = train_svm(X, y)
    far = np.ones((1, 2)) if a.decision_function(np.ones(2))[0] > 0 else np.zeros((1, 2))
    lab = int(np.sign(a.decision_function(far)[0]))
    assert lab * a.decision_function(far)[0] > 1
    b = train_svm(np.vstack([X, far]), np.append(y, lab))
    probe = np.random.default_rng(1).random((50, 2))
    np.testing.assert_allclose(a.decision_function(probe), b.decision_function(probe), atol=1e-2)


def test_warm_start_reaches_same_optimum():
    X, y = _random_instance(9, n=40, d=5)
    cold = train_svm(X, y)
    warm = train_svm(X, y, init_alpha=cold.alpha)
    assert abs(dual_objective(cold.alpha, X, y) - dual_objective(warm.alpha, X, y)) < 1e-4


def test_tie_and_hand_arithmetic():
    zero = SvmModel(np.zeros(2), 0.0, np.zeros(0), 1.0)
    assert decision_value(zero, [0.3, 0.7]) == 0.0
    assert predict(zero, [0.3, 0.7]) == 1
    m = SvmModel(np.array([1.0, 0.0]), -0.5, np.zeros(0), 1.0)
    assert decision_value(m, [1.0, 0.0]) == 0.5
    assert predict(m, [1.0, 0.0]) == 1
    with pytest.raises(ValueError):
        decision_value(m, [1.0, 0.0, 0.0])


def test_accuracy_complement_and_empty():
    X, y = _random_instance(2, n=30)
    m = train_svm(X, y)
    assert accuracy(m, X, -y) == pytest.approx(1.0 - accuracy(m, X, y))
    with pytest.raises(ValueError):
        accuracy(m, np.zeros((0, 3)), np.zeros(0))


def test_hinge_examples():
    m = SvmModel(np.array([1.0]), 0.0, np.zeros(0), 1.0)
    assert hinge_loss_sum(m, [[0.0]], [1]) == 1.0
    assert hinge_loss_sum(m, [[2.0], [-3.0]], [1, -1]) == 0.0
    # pushing a counted sample toward the wrong side raises the loss
    assert hinge_loss_sum(m, [[0.2]], [1]) > hinge_loss_sum(m, [[0.5]], [1])


def test_config_validation():
    with pytest.raises(ValueError):
        SvmConfig(C=0)
    with pytest.raises(ValueError):
        SvmConfig(tolerance=0)


def test_checkpoint_roundtrip(tmp_path):
    X, y = _random_instance(4, n=30)
    m = train_svm(X, y)
    save_model(m, tmp_path / "svm.npz")
    r = load_model(tmp_path / "svm.npz")
    assert np.array_equal(r.weights, m.weights) and r.bias == m.bias
    assert np.array_equal(r.alpha, m.alpha) and r.C == m.C


def test_mnist_desk_accuracy():
    pytest.importorskip("mlxtend")
    from poisonguard.data import build_rounds, bundled_mnist, make_binary_task

    task = make_binary_task(bundled_mnist(), 4, 0, rng_seed=0)
    r = build_rounds(task, 1, (100, 200, 200), rng_seed=0).rounds[0]
    m = train_svm(r.train.flat(), r.train.labels)
    assert accuracy(m, r.test.flat(), r.test.labels) >= 0.97
