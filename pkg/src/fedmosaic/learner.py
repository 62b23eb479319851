"""Small differentiable classifiers and the adaptive loss weight.

Two model kinds are supported, multinomial logistic regression and a
one-hidden-layer tanh MLP. Parameters live in a single flat float64 vector so
that gradients, finite-difference checks and checkpoints all work on the same
representation.
"""

from __future__ import annotations

import json
import math
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

PROB_FLOOR = 1e-12
LAMBDA_LOSS_FLOOR = 1e-8
LAMBDA_MAX = math.e
# exp underflows to 0.0 for very large loss ratios; keep the weight strictly positive
LAMBDA_MIN = sys.float_info.min

LOGISTIC = "multinomial_logistic"
MLP = "mlp_one_hidden"
MODEL_KINDS = (LOGISTIC, MLP)


class DivergenceError(FloatingPointError):
    """Raised when SGD produces a non-finite loss or parameter vector."""


@dataclass
class Model:
    kind: str
    dim: int
    num_classes: int
    params: np.ndarray
    hidden: Optional[int] = None

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == MLP and not self.hidden:
            raise ValueError("mlp_one_hidden needs a positive hidden size")
        self.params = np.asarray(self.params, dtype=np.float64)
        expected = num_params(self.kind, self.dim, self.num_classes, self.hidden)
        if self.params.shape != (expected,):
            raise ValueError(
                f"params has shape {self.params.shape}, expected ({expected},)"
            )

    def with_params(self, params) -> "Model":
        return Model(self.kind, self.dim, self.num_classes, params, self.hidden)

    def copy(self) -> "Model":
        return self.with_params(self.params.copy())

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "dims": [self.dim, self.num_classes] + ([self.hidden] if self.hidden else []),
            "params": self.params.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Model":
        dims = d["dims"]
        hidden = dims[2] if len(dims) > 2 else None
        return cls(d["kind"], dims[0], dims[1], np.asarray(d["params"], dtype=np.float64), hidden)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "Model":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def num_params(kind: str, dim: int, num_classes: int, hidden: Optional[int] = None) -> int:
    if kind == LOGISTIC:
        return dim * num_classes + num_classes
    return dim * hidden + hidden + hidden * num_classes + num_classes


def init_model(kind: str, dim: int, num_classes: int, hidden: Optional[int] = None,
               seed=None) -> Model:
    """Logistic models start at zero; MLP weights use a scaled Gaussian draw."""
    if kind == LOGISTIC:
        return Model(kind, dim, num_classes, np.zeros(num_params(kind, dim, num_classes)))
    rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, 1.0 / math.sqrt(dim), size=(dim, hidden))
    w2 = rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(hidden, num_classes))
    params = np.concatenate([w1.ravel(), np.zeros(hidden), w2.ravel(), np.zeros(num_classes)])
    return Model(kind, dim, num_classes, params, hidden)


def _unpack(model: Model, params=None):
    p = model.params if params is None else params
    d, c = model.dim, model.num_classes
    if model.kind == LOGISTIC:
        return p[: d * c].reshape(d, c), p[d * c:]
    h = model.hidden
    i = 0
    w1 = p[i:i + d * h].reshape(d, h)
    i += d * h
    b1 = p[i:i + h]
    i += h
    w2 = p[i:i + h * c].reshape(h, c)
    i += h * c
    return w1, b1, w2, p[i:]


def _as_features(model: Model, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.dim:
        raise ValueError(f"expected features of dimension {model.dim}, got shape {X.shape}")
    return X


def _forward(model: Model, X: np.ndarray, params=None):
    if model.kind == LOGISTIC:
        w, b = _unpack(model, params)
        return X @ w + b, None
    w1, b1, w2, b2 = _unpack(model, params)
    hid = np.tanh(X @ w1 + b1)
    return hid @ w2 + b2, hid


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def scores(model: Model, X) -> np.ndarray:
    """Raw class scores (logits), shape (n, C)."""
    return _forward(model, _as_features(model, X))[0]


def predict_probs(model: Model, X) -> np.ndarray:
    """Softmax probabilities; a single feature vector gives a length-C vector."""
    single = np.ndim(X) == 1
    probs = np.exp(_log_softmax(scores(model, X)))
    return probs[0] if single else probs


def _check_labels(model: Model, X, y):
    X = _as_features(model, X)
    y = np.asarray(y, dtype=np.int64).ravel()
    if len(y) != len(X):
        raise ValueError("features and labels differ in length")
    if len(y) and (y.min() < 0 or y.max() >= model.num_classes):
        raise ValueError("label out of range")
    return X, y


def _loss_and_grad(model: Model, X: np.ndarray, y: np.ndarray, params=None, need_grad=True):
    """Mean floored cross-entropy and its exact gradient w.r.t. the flat params.

    Examples whose true-class probability sits below the floor contribute a
    constant to the loss and therefore nothing to the gradient.
    """
    n = len(y)
    z, hid = _forward(model, X, params)
    logp = _log_softmax(z)
    logp_true = logp[np.arange(n), y]
    log_floor = math.log(PROB_FLOOR)
    loss = float(-np.maximum(logp_true, log_floor).mean())
    if not need_grad:
        return loss, None
    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    dz[logp_true < log_floor] = 0.0
    dz /= n
    if model.kind == LOGISTIC:
        return loss, np.concatenate([(X.T @ dz).ravel(), dz.sum(axis=0)])
    _, _, w2, _ = _unpack(model, params)
    da = (dz @ w2.T) * (1.0 - hid ** 2)
    grad = np.concatenate([
        (X.T @ da).ravel(), da.sum(axis=0), (hid.T @ dz).ravel(), dz.sum(axis=0),
    ])
    return loss, grad


def cross_entropy_loss(model: Model, X, y) -> float:
    X, y = _check_labels(model, X, y)
    if len(y) == 0:
        raise ValueError("cross-entropy of an empty dataset is undefined")
    return _loss_and_grad(model, X, y, need_grad=False)[0]


def compute_lambda(loss_priv: float, loss_pseudo: float) -> float:
    """Adaptive weight on the pseudo-labelled loss, in (0, e].

    Equals 1 when both losses agree and decays towards 0 as the pseudo-label
    loss grows relative to the private loss.
    """
    if loss_pseudo < 0 or loss_priv < 0:
        raise ValueError("losses must be non-negative")
    loss_priv = max(loss_priv, LAMBDA_LOSS_FLOOR)
    lam = math.exp(-(loss_pseudo - loss_priv) / loss_priv)
    return min(max(lam, LAMBDA_MIN), LAMBDA_MAX)


def _empty(X, y) -> bool:
    return X is None or y is None or len(y) == 0


def combined_loss(model: Model, X_priv, y_priv, X_pseudo=None, y_pseudo=None,
                  lam: float = 0.0) -> float:
    loss = cross_entropy_loss(model, X_priv, y_priv)
    if _empty(X_pseudo, y_pseudo) or lam == 0.0:
        return loss
    return loss + lam * cross_entropy_loss(model, X_pseudo, y_pseudo)


def grad_combined(model: Model, X_priv, y_priv, X_pseudo=None, y_pseudo=None,
                  lam: float = 0.0) -> np.ndarray:
    """Gradient of ``CE(priv) + lam * CE(pseudo)``; an empty pseudo batch drops the term."""
    if not 0.0 <= lam <= LAMBDA_MAX:
        raise ValueError(f"lambda {lam} outside [0, e]")
    X_priv, y_priv = _check_labels(model, X_priv, y_priv)
    if len(y_priv) == 0:
        raise ValueError("private batch is empty")
    grad = _loss_and_grad(model, X_priv, y_priv)[1]
    if not _empty(X_pseudo, y_pseudo) and lam != 0.0:
        X_pseudo, y_pseudo = _check_labels(model, X_pseudo, y_pseudo)
        grad = grad + lam * _loss_and_grad(model, X_pseudo, y_pseudo)[1]
    return grad


def per_example_grads(model: Model, X, y) -> np.ndarray:
    """Per-example cross-entropy gradients, shape (n, num_params)."""
    X, y = _check_labels(model, X, y)
    n = len(y)
    z, hid = _forward(model, X)
    logp = _log_softmax(z)
    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    dz[logp[np.arange(n), y] < math.log(PROB_FLOOR)] = 0.0
    if model.kind == LOGISTIC:
        return np.concatenate([np.einsum("ni,nc->nic", X, dz).reshape(n, -1), dz], axis=1)
    _, _, w2, _ = _unpack(model)
    da = (dz @ w2.T) * (1.0 - hid ** 2)
    return np.concatenate([
        np.einsum("ni,nh->nih", X, da).reshape(n, -1), da,
        np.einsum("nh,nc->nhc", hid, dz).reshape(n, -1), dz,
    ], axis=1)


def sgd_epoch(model: Model, X_priv, y_priv, X_pseudo=None, y_pseudo=None, lam: float = 0.0,
              step_size: float = 0.1, batch_size: int = 32, seed=None) -> Model:
    """One shuffled pass of mini-batch SGD on the combined objective.

    The private data sets the number of steps; the pseudo-labelled set is
    shuffled and split into the same number of batches so that each epoch
    also visits every pseudo-labelled example once.
    """
    if step_size < 0:
        raise ValueError("step size must be non-negative")
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    X_priv, y_priv = _check_labels(model, X_priv, y_priv)
    use_pseudo = not _empty(X_pseudo, y_pseudo) and lam != 0.0
    if use_pseudo:
        X_pseudo, y_pseudo = _check_labels(model, X_pseudo, y_pseudo)

    rng = np.random.default_rng(seed)
    n = len(y_priv)
    n_batches = max(1, math.ceil(n / batch_size))
    priv_batches = np.array_split(rng.permutation(n), n_batches)
    pseudo_batches = (
        np.array_split(rng.permutation(len(y_pseudo)), n_batches) if use_pseudo else None
    )

    params = model.params.copy()
    for k, idx in enumerate(priv_batches):
        # overflow is caught by the finiteness check below, not by numpy warnings
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grad = _loss_and_grad(model, X_priv[idx], y_priv[idx], params)
            if use_pseudo and len(pseudo_batches[k]):
                jdx = pseudo_batches[k]
                loss_u, grad_u = _loss_and_grad(model, X_pseudo[jdx], y_pseudo[jdx], params)
                loss += lam * loss_u
                grad = grad + lam * grad_u
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise DivergenceError(
                    f"non-finite loss {loss} at step {k} (step_size={step_size}, lambda={lam})"
                )
            params -= step_size * grad
    if not np.all(np.isfinite(params)):
        raise DivergenceError("non-finite parameters after SGD epoch")
    return model.with_params(params)


class SoftmaxClassifier(ClassifierMixin, BaseEstimator):
    """Scikit-learn wrapper around a single model trained with plain SGD.

    Parameters
    ----------
    kind : {"multinomial_logistic", "mlp_one_hidden"}
    hidden : int
        Hidden units, only used by the MLP.
    step_size, batch_size, epochs : SGD settings.
    random_state : int or None
    """

    def __init__(self, kind=LOGISTIC, hidden=16, step_size=0.1, batch_size=32, epochs=50,
                 random_state=None):
        self.kind = kind
        self.hidden = hidden
        self.step_size = step_size
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        ss = np.random.SeedSequence(self.random_state)
        init_seed, *epoch_seeds = ss.spawn(self.epochs + 1)
        model = init_model(self.kind, X.shape[1], len(self.classes_),
                           self.hidden if self.kind == MLP else None, seed=init_seed)
        for s in epoch_seeds:
            model = sgd_epoch(model, X, y_enc, step_size=self.step_size,
                              batch_size=self.batch_size, seed=s)
        self.model_ = model
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return predict_probs(self.model_, check_array(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
