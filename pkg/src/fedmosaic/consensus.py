"""Client uploads and server-side consensus over the public pool.

Predictions travel as class ids (one per public example); the one-hot form
only exists inside :func:`weighted_score_matrix`. All argmax ties resolve to
the lowest class index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .learner import Model, predict_probs

EXPERTISE_FLOOR = 1e-6

FREQUENCY = "frequency"
ENTROPY = "entropy"
MARGIN = "margin"
UNIFORM = "uniform"
EXPERTISE_VARIANTS = (FREQUENCY, ENTROPY, MARGIN, UNIFORM)


@dataclass(frozen=True)
class Upload:
    client_id: int
    round: int
    labels: np.ndarray
    expertise: np.ndarray | None = None

    def to_dict(self) -> dict:
        d = {"client_id": self.client_id, "round": self.round,
             "labels": [int(v) for v in self.labels]}
        if self.expertise is not None:
            d["expertise"] = [float(v) for v in self.expertise]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Upload":
        exp = d.get("expertise")
        return cls(int(d["client_id"]), int(d["round"]),
                   np.asarray(d["labels"], dtype=np.int64),
                   None if exp is None else np.asarray(exp, dtype=np.float64))


@dataclass(frozen=True)
class Download:
    round: int
    labels: np.ndarray

    def to_dict(self) -> dict:
        return {"round": self.round, "labels": [int(v) for v in self.labels]}

    @classmethod
    def from_dict(cls, d: dict) -> "Download":
        return cls(int(d["round"]), np.asarray(d["labels"], dtype=np.int64))


def _pool_features(pool) -> np.ndarray:
    return np.asarray(getattr(pool, "X", pool), dtype=np.float64)


def predict_hard(model: Model, pool) -> np.ndarray:
    """Class id per public example (argmax of the predicted probabilities)."""
    X = _pool_features(pool)
    if len(X) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmax(predict_probs(model, X), axis=1).astype(np.int64)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def expertise_frequency(class_freq_row, predictions) -> np.ndarray:
    """Relative frequency, in the client's training set, of each predicted class."""
    row = np.asarray(class_freq_row, dtype=np.float64)
    total = row.sum()
    if not total > 0:
        raise ValueError("class frequency row is all zero")
    pred = np.asarray(predictions, dtype=np.int64)
    return np.maximum(row[pred] / total, EXPERTISE_FLOOR)


def entropy(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def uncertainty_scores(probs, variant: str = ENTROPY) -> np.ndarray:
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if variant == ENTROPY:
        return 1.0 / (np.maximum(entropy(probs), 0.0) + EXPERTISE_FLOOR)
    if variant == MARGIN:
        top2 = np.sort(probs, axis=1)[:, -2:]
        return (top2[:, 1] - top2[:, 0]) + EXPERTISE_FLOOR
    raise ValueError(f"unknown uncertainty variant {variant!r}")


def expertise_uncertainty(model: Model, pool, variant: str = ENTROPY) -> np.ndarray:
    """Confidence score that shrinks as the prediction gets less certain."""
    X = _pool_features(pool)
    if len(X) == 0:
        return np.zeros(0)
    return uncertainty_scores(predict_probs(model, X), variant)


def weighted_score_matrix(preds: Sequence, experts: Sequence, num_classes: int) -> np.ndarray:
    """Sum over clients of diag(E_i) @ onehot(L_i), shape (|U|, C)."""
    if len(preds) != len(experts):
        raise ValueError("need one expertise vector per prediction vector")
    if not preds:
        raise ValueError("no client uploads")
    n = len(preds[0])
    S = np.zeros((n, num_classes))
    rows = np.arange(n)
    for L, E in zip(preds, experts):
        L = np.asarray(L, dtype=np.int64)
        E = np.asarray(E, dtype=np.float64)
        if L.shape != (n,) or E.shape != (n,):
            raise ValueError("prediction/expertise length mismatch")
        if n and (L.min() < 0 or L.max() >= num_classes):
            raise ValueError("predicted class out of range")
        if np.any(~np.isfinite(E)) or np.any(E <= 0):
            raise ValueError("expertise scores must be positive and finite")
        np.add.at(S, (rows, L), E)
    return S


def consensus_argmax(S) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. the lowest class id
    return np.argmax(np.asarray(S), axis=1).astype(np.int64)


def majority_consensus(preds: Sequence, num_classes: int) -> np.ndarray:
    if not preds:
        raise ValueError("no client predictions")
    n = len(preds[0])
    counts = np.zeros((n, num_classes), dtype=np.int64)
    for L in preds:
        L = np.asarray(L, dtype=np.int64)
        if L.shape != (n,):
            raise ValueError("prediction length mismatch")
        np.add.at(counts, (np.arange(n), L), 1)
    return consensus_argmax(counts)


def laplace_noise(size, scale: float, seed=None) -> np.ndarray:
    return np.random.default_rng(seed).laplace(0.0, scale, size=size)


def dp_noise_expertise(E, epsilon: float, clip_max: float = 1.0, seed=None) -> np.ndarray:
    """Clip to [floor, clip_max], add Laplace(clip_max / epsilon) noise, clip again."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if not clip_max > EXPERTISE_FLOOR:
        raise ValueError("clip_max must be positive and above the expertise floor")
    E = np.clip(np.asarray(E, dtype=np.float64), EXPERTISE_FLOOR, clip_max)
    noisy = E + laplace_noise(E.shape, clip_max / epsilon, seed)
    return np.clip(noisy, EXPERTISE_FLOOR, clip_max)
