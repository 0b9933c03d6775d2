"""Desk-scale classifier and generator trainers plus the oracle bundle.

The classifier is multinomial logistic regression trained by minibatch SGD
on the cross-entropy loss.  The generator is a diagonal-covariance Gaussian
mixture fitted by EM.  Both follow the scikit-learn estimator protocol so
they can be cloned, inspected via ``get_params`` and dropped into pipelines.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, DensityMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .dataset import LabeledDataset

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def _augment(X: np.ndarray) -> np.ndarray:
    return np.hstack([X, np.ones((len(X), 1))])


def cross_entropy_loss_grad(W: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float = 0.0):
    """Mean cross-entropy plus ``l2/2 * ||W[:, :-1]||^2`` and its gradient.

    ``W`` is ``(n_labels, d + 1)``; the last column is the bias and is not
    penalised.
    """
    Xa = _augment(X)
    P = softmax(Xa @ W.T)
    n = len(y)
    loss = -np.log(np.clip(P[np.arange(n), y], 1e-300, None)).mean()
    P[np.arange(n), y] -= 1.0
    grad = P.T @ Xa / n
    if l2:
        loss += 0.5 * l2 * np.sum(W[:, :-1] ** 2)
        grad[:, :-1] += l2 * W[:, :-1]
    return loss, grad


class SGDSoftmaxClassifier(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression trained by minibatch SGD.

    Parameters
    ----------
    n_labels : int
        Size of the label alphabet.  Fixed up front so a model trained on a
        label-degenerate sample still scores every label.
    epochs, batch_size, learning_rate, l2 :
        Usual SGD knobs; weights start at zero.
    random_state : int, Generator or None
        Drives minibatch shuffling.
    """

    def __init__(
        self,
        n_labels: int = 2,
        epochs: int = 10,
        batch_size: int = 64,
        learning_rate: float = 0.1,
        l2: float = 0.1,
        random_state=None,
    ):
        self.n_labels = n_labels
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.l2 = l2
        self.random_state = random_state

    def _init(self, d: int):
        self.classes_ = np.arange(self.n_labels)
        self.n_features_in_ = d
        self.coef_ = np.zeros((self.n_labels, d + 1))
        self.loss_history_ = []
        self.n_steps_ = 0
        self.constant_label_ = None

    def _step(self, X, y):
        loss, grad = cross_entropy_loss_grad(self.coef_, X, y, self.l2)
        if not np.isfinite(loss):
            raise TrainingError(
                f"non-finite loss after {self.n_steps_} steps "
                f"(lr={self.learning_rate}, |W|max={np.abs(self.coef_).max():.3g})"
            )
        self.coef_ -= self.learning_rate * grad
        self.n_steps_ += 1
        return loss

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        y = y.astype(np.int64)
        if y.min() < 0 or y.max() >= self.n_labels:
            raise ValueError(f"labels must lie in [0, {self.n_labels})")
        self._init(X.shape[1])
        present = np.unique(y)
        if len(present) == 1:
            # constant predictor; SGD would otherwise extrapolate off-support
            self.constant_label_ = int(present[0])
            self.coef_[self.constant_label_, -1] = 10.0
            return self
        rng = np.random.default_rng(self.random_state)
        n = len(y)
        for _ in range(self.epochs):
            perm = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                idx = perm[start : start + self.batch_size]
                self._step(X[idx], y[idx])
            self.loss_history_.append(self.full_loss(X, y))
        self._check_monotone()
        return self

    def fit_batches(self, batches: Iterable[tuple[np.ndarray, np.ndarray]], steps_per_epoch: int):
        """Train on an externally supplied minibatch stream.

        One SGD step per batch; the mean batch loss over each block of
        ``steps_per_epoch`` steps is logged as that epoch's loss.
        """
        started = False
        running = []
        for Xb, yb in batches:
            Xb = check_array(Xb, dtype=float)
            if not started:
                self._init(Xb.shape[1])
                started = True
            running.append(self._step(Xb, np.asarray(yb, dtype=np.int64)))
            if len(running) == steps_per_epoch:
                self.loss_history_.append(float(np.mean(running)))
                running = []
        if not started:
            raise ValueError("fit_batches received no batches")
        if running:
            self.loss_history_.append(float(np.mean(running)))
        return self

    def partial_fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        if not hasattr(self, "coef_"):
            self._init(X.shape[1])
        self._step(X, y.astype(np.int64))
        return self

    def _check_monotone(self):
        h = np.asarray(self.loss_history_)
        self.loss_monotone_ = bool(np.all(np.diff(h) <= 1e-6)) if len(h) > 1 else True
        if not self.loss_monotone_:
            logger.debug("training loss rose between epochs: %s", h)

    def full_loss(self, X, y) -> float:
        return float(cross_entropy_loss_grad(self.coef_, X, y, self.l2)[0])

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, classifier expects {self.n_features_in_}"
            )
        return X @ self.coef_[:, :-1].T + self.coef_[:, -1]

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        # argmax returns the first maximum, i.e. ties go to the lower label
        return np.argmax(self.decision_function(X), axis=1)

    def classify(self, X):
        P = self.predict_proba(X)
        return np.argmax(P, axis=1), P

    def to_dict(self) -> dict:
        check_is_fitted(self, "coef_")
        return {
            "kind": "classifier",
            "params": self.get_params(),
            "weights": self.coef_.tolist(),
            "loss_history": list(map(float, self.loss_history_)),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SGDSoftmaxClassifier":
        params = dict(payload["params"])
        params["random_state"] = params.get("random_state")
        model = cls(**params)
        W = np.asarray(payload["weights"], dtype=float)
        model._init(W.shape[1] - 1)
        model.coef_ = W
        model.loss_history_ = list(payload.get("loss_history", []))
        return model


def _log_gauss_diag(X, means, variances):
    """(n, K) log N(x | mean_k, diag(var_k))."""
    d = X.shape[1]
    prec = 1.0 / variances
    sq = ((X[:, None, :] - means[None, :, :]) ** 2 * prec[None]).sum(axis=2)
    return -0.5 * (d * np.log(2 * np.pi) + np.log(variances).sum(axis=1)[None, :] + sq)


def _logsumexp(a, axis=1):
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


class DiagonalGaussianMixture(DensityMixin, BaseEstimator):
    """Diagonal Gaussian mixture fitted by EM.

    Seeding picks the first mean uniformly from the data and each further
    mean with probability proportional to squared distance from the nearest
    chosen one (k-means++).  Per-dimension variances never drop below
    ``var_floor``.
    """

    def __init__(
        self,
        n_components: int = 4,
        max_iter: int = 100,
        tol: float = 1e-6,
        var_floor: float = 1e-6,
        random_state=None,
    ):
        self.n_components = n_components
        self.max_iter = max_iter
        self.tol = tol
        self.var_floor = var_floor
        self.random_state = random_state

    def _seed_means(self, X, rng):
        n = len(X)
        centers = [X[rng.integers(n)]]
        d2 = np.sum((X - centers[0]) ** 2, axis=1)
        for _ in range(1, self.n_components):
            total = d2.sum()
            if total <= 0:
                idx = rng.integers(n)
            else:
                idx = rng.choice(n, p=d2 / total)
            centers.append(X[idx])
            d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
        return np.array(centers)

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        n, d = X.shape
        K = self.n_components
        if n < K:
            raise ValueError(f"need at least n_components={K} samples, got {n}")
        rng = np.random.default_rng(self.random_state)
        means = self._seed_means(X, rng)
        variances = np.tile(np.maximum(X.var(axis=0), self.var_floor), (K, 1))
        weights = np.full(K, 1.0 / K)
        history = []
        converged = False
        for it in range(self.max_iter):
            # E step
            log_joint = _log_gauss_diag(X, means, variances) + np.log(
                np.where(weights > 0, weights, 1.0)
            )
            log_joint[:, weights <= 0] = -np.inf
            log_norm = _logsumexp(log_joint)
            history.append(float(log_norm.mean()))
            if len(history) > 1 and abs(history[-1] - history[-2]) < self.tol:
                converged = True
                break
            resp = np.exp(log_joint - log_norm[:, None])
            # M step
            nk = resp.sum(axis=0)
            weights = nk / n
            live = nk > 1e-12
            means[live] = (resp[:, live].T @ X) / nk[live, None]
            for k in np.flatnonzero(live):
                diff = X - means[k]
                variances[k] = resp[:, k] @ (diff**2) / nk[k]
            variances = np.maximum(variances, self.var_floor)
            weights = weights / weights.sum()
        self.weights_ = weights
        self.means_ = means
        self.covariances_ = variances
        self.log_likelihood_history_ = history
        self.n_iter_ = len(history)
        self.converged_ = converged
        self.n_features_in_ = d
        return self

    def score_samples(self, X) -> np.ndarray:
        check_is_fitted(self, "means_")
        X = check_array(X, dtype=float)
        log_joint = _log_gauss_diag(X, self.means_, self.covariances_)
        with np.errstate(divide="ignore"):
            log_joint = log_joint + np.log(self.weights_)
        return _logsumexp(log_joint)

    def score(self, X, y=None) -> float:
        return float(self.score_samples(X).mean())

    def sample(self, n: int, rng=None) -> np.ndarray:
        check_is_fitted(self, "means_")
        if n < 1:
            raise ValueError(f"n must be >= 1, got {n}")
        rng = np.random.default_rng(rng if rng is not None else self.random_state)
        comp = rng.choice(len(self.weights_), size=n, p=self.weights_)
        noise = rng.standard_normal((n, self.n_features_in_))
        return self.means_[comp] + np.sqrt(self.covariances_[comp]) * noise

    def to_dict(self) -> dict:
        check_is_fitted(self, "means_")
        return {
            "kind": "generator",
            "params": self.get_params(),
            "weights": self.weights_.tolist(),
            "means": self.means_.tolist(),
            "covariances": self.covariances_.tolist(),
            "log_likelihood": list(map(float, self.log_likelihood_history_)),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "DiagonalGaussianMixture":
        model = cls(**payload["params"])
        model.weights_ = np.asarray(payload["weights"], dtype=float)
        model.means_ = np.asarray(payload["means"], dtype=float)
        model.covariances_ = np.asarray(payload["covariances"], dtype=float)
        model.log_likelihood_history_ = list(payload.get("log_likelihood", []))
        model.n_iter_ = len(model.log_likelihood_history_)
        model.converged_ = True
        model.n_features_in_ = model.means_.shape[1]
        return model


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.1
    l2: float = 0.1
    n_components: int = 4
    em_max_iter: int = 100
    em_tol: float = 1e-6
    var_floor: float = 1e-6

    def validate(self):
        for name, value in asdict(self).items():
            floor_ok = value >= 0 if name == "l2" else value > 0
            if not floor_ok:
                bound = ">= 0" if name == "l2" else "> 0"
                raise ValueError(f"invalid TrainConfig.{name}: must be {bound}, got {value!r}")
        return self


def _seed_int(rng) -> int:
    return int(np.random.default_rng(rng).integers(2**63 - 1))


def train_classifier(X, y, config: TrainConfig, rng, n_labels: int = 2) -> SGDSoftmaxClassifier:
    return SGDSoftmaxClassifier(
        n_labels=n_labels,
        epochs=config.epochs,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        l2=config.l2,
        random_state=_seed_int(rng),
    ).fit(X, y)


def classify(model: SGDSoftmaxClassifier, X):
    return model.classify(X)


def fit_generator(X, config: TrainConfig, rng) -> DiagonalGaussianMixture:
    X = np.asarray(X, dtype=float)
    if not np.all(np.isfinite(X)):
        raise ValueError("generator features must be finite")
    return DiagonalGaussianMixture(
        n_components=config.n_components,
        max_iter=config.em_max_iter,
        tol=config.em_tol,
        var_floor=config.var_floor,
        random_state=_seed_int(rng),
    ).fit(X)


def sample_generator(model: DiagonalGaussianMixture, n: int, rng) -> np.ndarray:
    return model.sample(n, rng)


@dataclass
class Oracles:
    g0: DiagonalGaussianMixture
    a_l: SGDSoftmaxClassifier
    a_s: list = field(default_factory=list)


def build_oracles(
    data: LabeledDataset,
    classifier_config: TrainConfig,
    generator_config: TrainConfig | None = None,
    rng=None,
) -> Oracles:
    """Fit G_0 on features and one annotator for labels and per attribute."""
    if len(data) == 0:
        raise ValueError("cannot build oracles from an empty dataset")
    rng = np.random.default_rng(rng)
    generator_config = generator_config or classifier_config
    streams = rng.spawn(2 + data.schema.n_attributes)
    g0 = fit_generator(data.X, generator_config, streams[0])
    a_l = train_classifier(data.X, data.y, classifier_config, streams[1], data.schema.n_labels)
    a_s = [
        train_classifier(data.X, data.s[:, k], classifier_config, streams[2 + k], card)
        for k, card in enumerate(data.schema.groups)
    ]
    return Oracles(g0=g0, a_l=a_l, a_s=a_s)


def save_model(model, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict()))


def load_model(path):
    payload = json.loads(Path(path).read_text())
    kind = payload.get("kind")
    if kind == "classifier":
        return SGDSoftmaxClassifier.from_dict(payload)
    if kind == "generator":
        return DiagonalGaussianMixture.from_dict(payload)
    raise ValueError(f"unknown model kind {kind!r} in {path}")
