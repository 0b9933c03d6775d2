import json

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment
from sklearn.base import clone
from sklearn.linear_model import LogisticRegression
from sklearn.mixture import GaussianMixture

from mids.dataset import BlobsConfig, make_colored_blobs
from mids.models import (
    DiagonalGaussianMixture,
    SGDSoftmaxClassifier,
    TrainConfig,
    build_oracles,
    cross_entropy_loss_grad,
    fit_generator,
    load_model,
    save_model,
    softmax,
    train_classifier,
)


def _central_difference(f, W, h=1e-6):
    g = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        up, down = W.copy(), W.copy()
        up[idx] += h
        down[idx] -= h
        g[idx] = (f(up) - f(down)) / (2 * h)
    return g


def _blobs(n=2000, seed=0):
    return make_colored_blobs(BlobsConfig(n=n), seed)


# -- softmax and loss ----------------------------------------------------------

def test_softmax_rows_sum_to_one_and_are_shift_invariant():
    z = np.random.default_rng(0).normal(size=(5, 3)) * 50
    p = softmax(z)
    assert np.allclose(p.sum(axis=1), 1.0)
    assert np.allclose(softmax(z + 1000.0), p)
    assert np.all(np.isfinite(softmax(np.array([[1e4, -1e4]]))))


@pytest.mark.parametrize("l2", [0.0, 0.1, 1.0])
def test_gradient_matches_central_differences(l2):
    rng = np.random.default_rng(1)
    for _ in range(10):
        k, d, n = int(rng.integers(2, 5)), int(rng.integers(1, 5)), int(rng.integers(3, 30))
        X = rng.normal(size=(n, d))
        y = rng.integers(0, k, n)
        W = rng.normal(size=(k, d + 1))
        _, grad = cross_entropy_loss_grad(W, X, y, l2)
        fd = _central_difference(lambda V: cross_entropy_loss_grad(V, X, y, l2)[0], W)
        assert np.allclose(grad, fd, rtol=1e-4, atol=1e-7)


def test_bias_is_not_penalised():
    X = np.zeros((4, 1))
    y = np.array([0, 1, 0, 1])
    W = np.array([[0.0, 3.0], [0.0, -3.0]])
    loss0, _ = cross_entropy_loss_grad(W, X, y, 0.0)
    loss1, _ = cross_entropy_loss_grad(W, X, y, 5.0)
    assert loss0 == loss1


# -- classifier --------------------------------------------------------------

def test_classifier_learns_blobs_and_loss_decreases():
    data = _blobs()
    clf = SGDSoftmaxClassifier(random_state=0).fit(data.X, data.y)
    assert clf.score(data.X, data.y) > 0.85
    assert clf.loss_history_[-1] < clf.loss_history_[0]
    assert len(clf.loss_history_) == clf.epochs


def test_classifier_agrees_with_reference_logistic_regression():
    data = _blobs(4000, 3)
    ours = SGDSoftmaxClassifier(epochs=30, l2=1e-4, random_state=0).fit(data.X, data.y)
    ref = LogisticRegression(C=1e4).fit(data.X, data.y)
    assert np.mean(ours.predict(data.X) == ref.predict(data.X)) > 0.97


def test_zero_weights_break_ties_to_lower_label():
    clf = SGDSoftmaxClassifier(n_labels=3)
    clf._init(2)
    assert clf.predict(np.ones((4, 2))).tolist() == [0, 0, 0, 0]


def test_single_label_sample_gives_constant_predictor():
    X = np.random.default_rng(0).normal(size=(20, 2))
    clf = SGDSoftmaxClassifier(n_labels=2).fit(X, np.ones(20, dtype=int))
    assert set(clf.predict(np.random.default_rng(1).normal(size=(50, 2)) * 10)) == {1}
    assert clf.predict_proba(X).shape == (20, 2)


def test_classifier_rejects_bad_input():
    clf = SGDSoftmaxClassifier().fit(np.eye(2), [0, 1])
    with pytest.raises(ValueError, match="features"):
        clf.predict(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        SGDSoftmaxClassifier(n_labels=2).fit(np.eye(3), [0, 1, 2])


def test_classifier_is_a_sklearn_estimator():
    clf = SGDSoftmaxClassifier(epochs=3, l2=0.5)
    twin = clone(clf)
    assert twin.get_params() == clf.get_params()
    data = _blobs(300)
    a = clone(clf).set_params(random_state=4).fit(data.X, data.y)
    b = clone(clf).set_params(random_state=4).fit(data.X, data.y)
    assert np.array_equal(a.coef_, b.coef_)


def test_fit_batches_one_step_per_batch():
    data = _blobs(640)
    batches = [(data.X[i:i + 64], data.y[i:i + 64]) for i in range(0, 640, 64)]
    clf = SGDSoftmaxClassifier().fit_batches(iter(batches), steps_per_epoch=5)
    assert clf.n_steps_ == 10 and len(clf.loss_history_) == 2
    with pytest.raises(ValueError):
        SGDSoftmaxClassifier().fit_batches(iter([]), 5)


def test_partial_fit_takes_one_step():
    data = _blobs(100)
    clf = SGDSoftmaxClassifier(learning_rate=0.5)
    clf.partial_fit(data.X, data.y)
    _, grad = cross_entropy_loss_grad(np.zeros((2, 3)), data.X, data.y, clf.l2)
    assert np.allclose(clf.coef_, -0.5 * grad)


def test_classifier_round_trip(tmp_path):
    data = _blobs(300)
    clf = train_classifier(data.X, data.y, TrainConfig(epochs=2), 0)
    save_model(clf, tmp_path / "c.json")
    back = load_model(tmp_path / "c.json")
    assert np.array_equal(back.predict(data.X), clf.predict(data.X))
    assert np.allclose(back.predict_proba(data.X), clf.predict_proba(data.X))


# -- mixture -----------------------------------------------------------------

def test_em_log_likelihood_is_monotone():
    rng = np.random.default_rng(0)
    for i in range(20):
        X = rng.normal(size=(int(rng.integers(50, 300)), 2)) * rng.uniform(0.3, 3, 2)
        X[: len(X) // 3] += rng.normal(size=2) * 4
        g = DiagonalGaussianMixture(n_components=int(rng.integers(1, 5)), random_state=i).fit(X)
        assert np.all(np.diff(g.log_likelihood_history_) >= -1e-9)


def test_single_component_is_the_mle():
    X = np.random.default_rng(2).normal(loc=[1.0, -2.0], scale=[0.5, 2.0], size=(500, 2))
    g = DiagonalGaussianMixture(n_components=1, random_state=0).fit(X)
    assert np.allclose(g.means_[0], X.mean(axis=0), atol=1e-12)
    assert np.allclose(g.covariances_[0], X.var(axis=0), atol=1e-12)
    assert g.weights_.tolist() == [1.0]


def test_mixture_recovers_separated_components_like_sklearn():
    rng = np.random.default_rng(5)
    centers = np.array([[-6.0, 0.0], [0.0, 6.0], [6.0, 0.0]])
    X = np.concatenate([c + 0.5 * rng.normal(size=(400, 2)) for c in centers])
    ours = DiagonalGaussianMixture(n_components=3, random_state=1).fit(X)
    ref = GaussianMixture(3, covariance_type="diag", random_state=0).fit(X)
    cost = np.linalg.norm(ours.means_[:, None] - ref.means_[None], axis=2)
    rows, cols = linear_sum_assignment(cost)
    assert cost[rows, cols].max() < 0.05
    assert ours.score(X) == pytest.approx(ref.score(X), abs=1e-3)


def test_variance_floor_holds_on_degenerate_data():
    X = np.zeros((50, 2))
    X[25:] = 1.0
    g = DiagonalGaussianMixture(n_components=2, var_floor=1e-4, random_state=0).fit(X)
    assert np.all(g.covariances_ >= 1e-4)
    assert np.all(np.isfinite(g.score_samples(X)))


def test_mixture_sampling_moments():
    g = DiagonalGaussianMixture(n_components=1).fit(
        np.random.default_rng(0).normal(size=(1000, 2)) * [1.0, 3.0])
    S = g.sample(20000, np.random.default_rng(1))
    assert np.allclose(S.mean(axis=0), g.means_[0], atol=4.5 * 3 / np.sqrt(20000))
    assert np.allclose(S.var(axis=0), g.covariances_[0], rtol=0.05)


def test_mixture_needs_enough_samples():
    with pytest.raises(ValueError):
        DiagonalGaussianMixture(n_components=5).fit(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        fit_generator(np.array([[np.inf, 0.0]] * 10), TrainConfig(n_components=1), 0)


def test_mixture_round_trip(tmp_path):
    X = _blobs(500).X
    g = fit_generator(X, TrainConfig(), 0)
    save_model(g, tmp_path / "g.json")
    back = load_model(tmp_path / "g.json")
    assert np.allclose(back.score_samples(X), g.score_samples(X))
    assert np.array_equal(back.sample(10, 3), g.sample(10, 3))
    bad = tmp_path / "x.json"
    bad.write_text(json.dumps({"kind": "nope"}))
    with pytest.raises(ValueError):
        load_model(bad)


# -- configuration and oracles -------------------------------------------------------

@pytest.mark.parametrize("field", ["epochs", "batch_size", "learning_rate", "n_components"])
def test_train_config_names_invalid_field(field):
    with pytest.raises(ValueError, match=field):
        TrainConfig(**{field: 0}).validate()


def test_train_config_allows_zero_l2():
    TrainConfig(l2=0.0).validate()


def test_oracles_annotate_the_source():
    data = make_colored_blobs(BlobsConfig(n=5000), 0)
    oracles = build_oracles(data, TrainConfig(), rng=1)
    held = make_colored_blobs(BlobsConfig(n=5000), 2)
    assert np.mean(oracles.a_l.predict(held.X) == held.y) > 0.88
    assert np.mean(oracles.a_s[0].predict(held.X) == held.s[:, 0]) > 0.97
    assert oracles.g0.means_.shape == (4, 2)
    with pytest.raises(ValueError):
        build_oracles(data.subset([]), TrainConfig())
