"""Intrusion classifiers run on the worker nodes.

Four estimators with a shared surface: Fisher LDA (which doubles as a 1-D
projection transformer), logistic regression and a linear SVM trained by
full-batch gradient descent, and a small sigmoid MLP trained by
backpropagation. All follow the scikit-learn estimator protocol so they
drop into pipelines and ``get_params``/``set_params`` work as usual.

Positive class is 1 (attack). Every model breaks ties at its decision
boundary toward the positive class.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import ConvergenceWarning
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .dataset import EncodedRecord, to_arrays

MODEL_FORMAT = "dqm-model"
MODEL_VERSION = 1


class ModelError(ValueError):
    """Invalid training input, degenerate fit, or bad model file."""


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return asdict(self)


def accuracy(c: ConfusionMatrix) -> float:
    """(TP + TN) / (TP + TN + FP + FN)."""
    if c.total == 0:
        raise ValueError("accuracy of an empty confusion matrix is undefined")
    return (c.tp + c.tn) / c.total


def confusion(y_true, y_pred) -> ConfusionMatrix:
    y_true = np.asarray(y_true).astype(bool)
    y_pred = np.asarray(y_pred).astype(bool)
    if y_true.shape != y_pred.shape:
        raise ValueError("label arrays differ in shape")
    return ConfusionMatrix(
        tp=int(np.sum(y_pred & y_true)),
        fp=int(np.sum(y_pred & ~y_true)),
        tn=int(np.sum(~y_pred & ~y_true)),
        fn=int(np.sum(~y_pred & y_true)),
    )


def _check_binary(X, y):
    X, y = check_X_y(X, y, dtype=float)
    y = y.astype(np.int64)
    labels = set(np.unique(y).tolist())
    if not labels <= {0, 1}:
        raise ModelError(f"labels must be 0/1, got {sorted(labels)}")
    if labels != {0, 1}:
        raise ModelError("training data must contain both classes")
    return X, y


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


class _BinaryModel(ClassifierMixin, BaseEstimator):
    kind = ""

    def _setup(self, X):
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]

    def _check_X(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X

    def predict(self, X):
        return (self.decision_function(X) >= 0.0).astype(np.int64)

    @property
    def feature_dim(self) -> int:
        return self.n_features_in_


class LDAClassifier(TransformerMixin, _BinaryModel):
    """Two-class Fisher discriminant.

    The direction is ``w = (S_w + eps*I)^-1 (mu1 - mu0)`` with ``S_w`` the
    pooled within-class covariance and ``eps = reg * trace(S_w) / d``. The
    threshold on ``w.x`` is the midpoint of the projected class means shifted
    by ``ln(pi0/pi1)``.
    """

    kind = "lda"

    def __init__(self, reg=1e-6):
        self.reg = reg

    def fit(self, X, y):
        X, y = _check_binary(X, y)
        t0 = time.perf_counter()
        self._setup(X)
        X0, X1 = X[y == 0], X[y == 1]
        mu0, mu1 = X0.mean(axis=0), X1.mean(axis=0)
        A0, A1 = X0 - mu0, X1 - mu1
        dof = max(len(X) - 2, 1)
        Sw = (A0.T @ A0 + A1.T @ A1) / dof
        if not np.all(np.isfinite(Sw)):
            raise ModelError("non-finite within-class covariance")
        d = X.shape[1]
        eps = self.reg * np.trace(Sw) / d
        if eps <= 0:
            eps = self.reg
        diff = mu1 - mu0
        if not np.any(diff):
            raise ModelError("class means coincide; no discriminant direction")
        w = np.linalg.solve(Sw + eps * np.eye(d), diff)
        if not np.all(np.isfinite(w)) or not np.any(w):
            raise ModelError("degenerate discriminant direction")
        pi1 = len(X1) / len(X)
        self.coef_ = w
        self.means_ = np.vstack([mu0, mu1])
        self.priors_ = np.array([1.0 - pi1, pi1])
        self.threshold_ = float(0.5 * (w @ mu0 + w @ mu1) + np.log((1.0 - pi1) / pi1))
        self.train_time_ = time.perf_counter() - t0
        return self

    def project(self, X):
        """1-D reduced representation ``X @ w``."""
        return self._check_X(X) @ self.coef_

    def transform(self, X):
        return self.project(X)[:, None]

    def decision_function(self, X):
        return self.project(X) - self.threshold_

    def predict(self, X):
        return (self.project(X) >= self.threshold_).astype(np.int64)

    def _export(self):
        return {"coef": self.coef_.tolist(), "means": self.means_.tolist(),
                "priors": self.priors_.tolist(), "threshold": self.threshold_}

    def _import(self, p):
        self.coef_ = np.asarray(p["coef"], dtype=float)
        self.means_ = np.asarray(p["means"], dtype=float)
        self.priors_ = np.asarray(p["priors"], dtype=float)
        self.threshold_ = float(p["threshold"])


def _lipschitz_bound(X) -> float:
    """Largest eigenvalue of [X 1]^T [X 1] / n, by deterministic power iteration."""
    n, d = X.shape
    v = np.ones(d + 1) / np.sqrt(d + 1)
    lam = 0.0
    for _ in range(100):
        u = X @ v[:d] + v[d]
        g = np.append(X.T @ u, u.sum()) / n
        lam_new = float(np.linalg.norm(g))
        if lam_new == 0.0:
            return 1.0
        v = g / lam_new
        if abs(lam_new - lam) <= 1e-6 * lam_new:
            break
        lam = lam_new
    return lam_new


class _GradientLinearModel(_BinaryModel):
    def _step_size(self, X, curvature):
        if self.learning_rate == "auto":
            return 1.0 / (curvature * _lipschitz_bound(X) + self.l2)
        return float(self.learning_rate)

    def decision_function(self, X):
        return self._check_X(X) @ self.coef_ + self.intercept_

    def _export(self):
        return {"coef": self.coef_.tolist(), "intercept": self.intercept_,
                "converged": self.converged_, "n_iter": self.n_iter_}

    def _import(self, p):
        self.coef_ = np.asarray(p["coef"], dtype=float)
        self.intercept_ = float(p["intercept"])
        self.converged_ = bool(p["converged"])
        self.n_iter_ = int(p["n_iter"])


class LogisticRegressionGD(_GradientLinearModel):
    """L2-penalised logistic regression, full-batch gradient descent.

    ``learning_rate="auto"`` uses ``1/L`` for the loss's gradient Lipschitz
    constant, which fixes the step for the whole run.
    """

    kind = "lr"

    def __init__(self, l2=1e-4, learning_rate="auto", max_iter=500, tol=1e-6):
        self.l2 = l2
        self.learning_rate = learning_rate
        self.max_iter = max_iter
        self.tol = tol

    def loss_and_grad(self, w, b, X, y):
        z = X @ w + b
        loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * self.l2 * (w @ w)
        r = (_sigmoid(z) - y) / len(y)
        return loss, X.T @ r + self.l2 * w, r.sum()

    def fit(self, X, y):
        X, y = _check_binary(X, y)
        t0 = time.perf_counter()
        self._setup(X)
        lr = self._step_size(X, 0.25)
        w, b = np.zeros(X.shape[1]), 0.0
        loss, gw, gb = self.loss_and_grad(w, b, X, y)
        self.converged_ = False
        for it in range(1, self.max_iter + 1):
            w = w - lr * gw
            b = b - lr * gb
            new_loss, gw, gb = self.loss_and_grad(w, b, X, y)
            if not np.isfinite(new_loss):
                raise ModelError(f"logistic loss diverged at iteration {it}")
            done = abs(loss - new_loss) < self.tol
            loss = new_loss
            if done:
                self.converged_ = True
                break
        self.n_iter_ = it if self.max_iter else 0
        self.loss_ = float(loss)
        self.coef_, self.intercept_ = w, float(b)
        if not self.converged_:
            warnings.warn(f"logistic regression did not converge in {self.max_iter} iterations",
                          ConvergenceWarning, stacklevel=2)
        self.train_time_ = time.perf_counter() - t0
        return self

    def predict_proba(self, X):
        p = _sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - p, p])


class LinearSVMGD(_GradientLinearModel):
    """Linear SVM: L2-penalised mean hinge loss, subgradient descent.

    Keeps the iterate with the lowest objective seen, since subgradient
    steps are not monotone.
    """

    kind = "svm"

    def __init__(self, l2=1e-4, learning_rate="auto", max_iter=500, tol=1e-6):
        self.l2 = l2
        self.learning_rate = learning_rate
        self.max_iter = max_iter
        self.tol = tol

    def loss_and_subgrad(self, w, b, X, s):
        margin = s * (X @ w + b)
        active = margin < 1.0
        loss = np.mean(np.where(active, 1.0 - margin, 0.0)) + 0.5 * self.l2 * (w @ w)
        coef = np.where(active, -s, 0.0) / len(s)
        return loss, X.T @ coef + self.l2 * w, coef.sum()

    def fit(self, X, y):
        X, y = _check_binary(X, y)
        t0 = time.perf_counter()
        self._setup(X)
        s = 2.0 * y - 1.0
        lr = self._step_size(X, 1.0)
        w, b = np.zeros(X.shape[1]), 0.0
        loss, gw, gb = self.loss_and_subgrad(w, b, X, s)
        best = (loss, w, b)
        self.converged_ = False
        for it in range(1, self.max_iter + 1):
            w = w - lr * gw
            b = b - lr * gb
            new_loss, gw, gb = self.loss_and_subgrad(w, b, X, s)
            if not np.isfinite(new_loss):
                raise ModelError(f"hinge loss diverged at iteration {it}")
            if new_loss < best[0]:
                best = (new_loss, w, b)
            done = abs(loss - new_loss) < self.tol
            loss = new_loss
            if done:
                self.converged_ = True
                break
        self.n_iter_ = it if self.max_iter else 0
        self.loss_, w, b = best
        self.coef_, self.intercept_ = w, float(b)
        if not self.converged_:
            warnings.warn(f"linear SVM did not converge in {self.max_iter} iterations",
                          ConvergenceWarning, stacklevel=2)
        self.train_time_ = time.perf_counter() - t0
        return self


_ACTIVATIONS = {
    "sigmoid": (_sigmoid, lambda a: a * (1.0 - a)),
    "relu": (lambda z: np.maximum(z, 0.0), lambda a: (a > 0).astype(float)),
}


class MLPClassifierBP(_BinaryModel):
    """Feed-forward net with one sigmoid output unit, mini-batch backprop.

    Weights start uniform in ``[-init_range, init_range]`` from
    ``random_state``; batches are reshuffled every epoch from the same
    generator, so a fit is a pure function of data and parameters.
    """

    kind = "mlp"

    def __init__(self, hidden_layer_sizes=(32,), activation="sigmoid", epochs=50,
                 learning_rate=0.1, batch_size=64, init_range=0.5, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.init_range = init_range
        self.random_state = random_state

    def _init_params(self, d, rng):
        sizes = [d, *self.hidden_layer_sizes, 1]
        params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            params.append(rng.uniform(-self.init_range, self.init_range, (fan_in, fan_out)))
            params.append(rng.uniform(-self.init_range, self.init_range, fan_out))
        return params

    def _forward(self, params, X):
        act = _ACTIVATIONS[self.activation][0]
        acts = [X]
        h = X
        for W, b in zip(params[0:-2:2], params[1:-2:2]):
            h = act(h @ W + b)
            acts.append(h)
        logit = (h @ params[-2] + params[-1])[:, 0]
        return acts, logit

    def loss_and_grad(self, params, X, y):
        """Mean binary cross-entropy and its gradient w.r.t. every parameter array."""
        dact = _ACTIVATIONS[self.activation][1]
        acts, logit = self._forward(params, X)
        loss = float(np.mean(np.logaddexp(0.0, logit) - y * logit))
        delta = ((_sigmoid(logit) - y) / len(y))[:, None]
        grads = [None] * len(params)
        for layer in range(len(params) // 2 - 1, -1, -1):
            W = params[2 * layer]
            grads[2 * layer] = acts[layer].T @ delta
            grads[2 * layer + 1] = delta.sum(axis=0)
            if layer:
                delta = (delta @ W.T) * dact(acts[layer])
        return loss, grads

    def fit(self, X, y):
        X, y = _check_binary(X, y)
        if not self.hidden_layer_sizes:
            raise ModelError("an MLP needs at least one hidden layer")
        if self.activation not in _ACTIVATIONS:
            raise ModelError(f"unknown activation {self.activation!r}")
        t0 = time.perf_counter()
        self._setup(X)
        rng = np.random.default_rng(self.random_state)
        params = self._init_params(X.shape[1], rng)
        yf = y.astype(float)
        n = len(X)
        self.loss_curve_ = []
        for epoch in range(1, self.epochs + 1):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, self.batch_size):
                idx = order[start : start + self.batch_size]
                loss, grads = self.loss_and_grad(params, X[idx], yf[idx])
                total += loss * len(idx)
                for p, g in zip(params, grads):
                    p -= self.learning_rate * g
            epoch_loss = total / n
            if not np.isfinite(epoch_loss) or not all(np.all(np.isfinite(p)) for p in params):
                raise FloatingPointError(f"MLP loss became non-finite at epoch {epoch}")
            self.loss_curve_.append(epoch_loss)
        self.params_ = params
        self.train_time_ = time.perf_counter() - t0
        return self

    def decision_function(self, X):
        X = self._check_X(X)
        return self._forward(self.params_, X)[1]

    def predict_proba(self, X):
        p = _sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def _export(self):
        return {"params": [p.tolist() for p in self.params_]}

    def _import(self, p):
        self.params_ = [np.asarray(a, dtype=float) for a in p["params"]]


MODEL_KINDS = {
    "lda": LDAClassifier,
    "lr": LogisticRegressionGD,
    "svm": LinearSVMGD,
    "mlp": MLPClassifierBP,
}


def make_model(kind: str, **params):
    try:
        cls = MODEL_KINDS[kind.lower()]
    except KeyError:
        raise ModelError(f"unknown model kind {kind!r}; choose from {sorted(MODEL_KINDS)}") from None
    return cls(**params)


def _xy(data):
    if isinstance(data, tuple):
        return data
    return to_arrays(list(data))


def fit_lda(train: list[EncodedRecord], **params) -> LDAClassifier:
    return LDAClassifier(**params).fit(*_xy(train))


def fit_logreg(train: list[EncodedRecord], **params) -> LogisticRegressionGD:
    return LogisticRegressionGD(**params).fit(*_xy(train))


def fit_svm(train: list[EncodedRecord], **params) -> LinearSVMGD:
    return LinearSVMGD(**params).fit(*_xy(train))


def fit_mlp(train: list[EncodedRecord], **params) -> MLPClassifierBP:
    return MLPClassifierBP(**params).fit(*_xy(train))


def predict(model, x) -> int:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("predict expects a single feature vector")
    return int(model.predict(x[None, :])[0])


def project_lda(model, x):
    if not isinstance(model, LDAClassifier):
        raise ModelError(f"projection needs an LDA model, got {getattr(model, 'kind', type(model).__name__)}")
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return float(model.project(x[None, :])[0])
    return model.project(x)


def evaluate(model, data) -> ConfusionMatrix:
    X, y = _xy(data)
    if len(y) == 0:
        raise ValueError("cannot evaluate on empty data")
    return confusion(y, model.predict(X))


@dataclass
class TrainingReport:
    model: object
    train_accuracy: float
    confusion: ConfusionMatrix
    train_time_s: float

    def to_dict(self) -> dict:
        return {
            "kind": self.model.kind,
            "train_time_s": self.train_time_s,
            "train_accuracy": self.train_accuracy,
            "confusion": self.confusion.to_dict(),
        }


def train(kind: str, X, y, **params) -> TrainingReport:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        model = make_model(kind, **params).fit(X, y)
    cm = evaluate(model, (X, y))
    return TrainingReport(model, accuracy(cm), cm, model.train_time_)


def save_model(model, path) -> Path:
    check_is_fitted(model, "n_features_in_")
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "kind": model.kind,
        "feature_dim": int(model.n_features_in_),
        "hyperparameters": model.get_params(),
        "parameters": model._export(),
    }
    path = Path(path)
    path.write_text(json.dumps(doc))
    return path


def load_model(path, expected_dim: int | None = None):
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != MODEL_FORMAT or doc.get("version") != MODEL_VERSION:
        raise ModelError(f"{path}: not a {MODEL_FORMAT} v{MODEL_VERSION} file")
    if expected_dim is not None and doc["feature_dim"] != expected_dim:
        raise ModelError(f"{path}: model has feature_dim {doc['feature_dim']}, data has {expected_dim}")
    hp = doc["hyperparameters"]
    if "hidden_layer_sizes" in hp:
        hp["hidden_layer_sizes"] = tuple(hp["hidden_layer_sizes"])
    model = make_model(doc["kind"], **hp)
    model.classes_ = np.array([0, 1])
    model.n_features_in_ = doc["feature_dim"]
    model._import(doc["parameters"])
    model.train_time_ = 0.0
    return model
