"""Scikit-learn style front end for the federated simulation."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset, PublicPool
from .learner import LOGISTIC, predict_probs
from .protocol import FEDMOSAIC, DPConfig, ProtocolConfig, run_experiment


class FedMosaicClassifier(ClassifierMixin, BaseEstimator):
    """One personalized model per client, trained by federated co-training.

    ``fit`` takes per-client feature/label lists and the unlabelled public
    features; ``predict`` answers for one client (``client=0`` by default, so
    ``score`` works unchanged for single-client evaluation).

    Examples
    --------
    >>> clf = FedMosaicClassifier(num_rounds=10).fit(Xs, ys, X_public)  # doctest: +SKIP
    >>> clf.predict(X_test, client=2)                                    # doctest: +SKIP
    """

    def __init__(self, mode=FEDMOSAIC, num_rounds=20, sync_period=1, step_size=0.1,
                 batch_size=16, expertise_variant="frequency", model_kind=LOGISTIC, hidden=16,
                 dp_epsilon=None, dp_clip_max=1.0, n_jobs=1, random_state=0):
        self.mode = mode
        self.num_rounds = num_rounds
        self.sync_period = sync_period
        self.step_size = step_size
        self.batch_size = batch_size
        self.expertise_variant = expertise_variant
        self.model_kind = model_kind
        self.hidden = hidden
        self.dp_epsilon = dp_epsilon
        self.dp_clip_max = dp_clip_max
        self.n_jobs = n_jobs
        self.random_state = random_state

    def _config(self) -> ProtocolConfig:
        dp = None if self.dp_epsilon is None else DPConfig(self.dp_epsilon, self.dp_clip_max)
        return ProtocolConfig(
            num_rounds=self.num_rounds, sync_period=self.sync_period, step_size=self.step_size,
            batch_size=self.batch_size, expertise_variant=self.expertise_variant, dp=dp,
            mode=self.mode, seed=self.random_state or 0, model_kind=self.model_kind,
            hidden=self.hidden, n_jobs=self.n_jobs,
        ).validate()

    def fit(self, X_clients, y_clients, X_public=None, eval_sets=None):
        if len(X_clients) != len(y_clients) or not len(X_clients):
            raise ValueError("need matching, non-empty per-client X and y lists")
        pairs = [check_X_y(X, y) for X, y in zip(X_clients, y_clients)]
        self.classes_ = np.unique(np.concatenate([y for _, y in pairs]))
        C = len(self.classes_)
        offset = 0
        shards = []
        for X, y in pairs:
            ids = np.arange(offset, offset + len(y))
            offset += len(y)
            shards.append(Dataset(X, np.searchsorted(self.classes_, y), C, ids))
        self.n_features_in_ = shards[0].dim

        pool = None
        if X_public is not None:
            Xp = check_array(X_public)
            pool = PublicPool(Xp, np.arange(offset, offset + len(Xp)))
        if eval_sets is None:
            tests = shards
        else:
            tests = []
            for X, y in eval_sets:
                X, y = check_X_y(X, y)
                tests.append(Dataset(X, np.searchsorted(self.classes_, y), C,
                                     np.arange(len(y))))
        self.record_ = run_experiment(shards, pool, tests, self._config())
        self.models_ = self.record_.models()
        return self

    def predict_proba(self, X, client=0):
        check_is_fitted(self, "models_")
        return predict_probs(self.models_[client], check_array(X))

    def predict(self, X, client=0):
        proba = self.predict_proba(X, client)
        return self.classes_[np.argmax(proba, axis=1)]

    @property
    def lambdas_(self) -> np.ndarray:
        """Adaptive weight per (client, round)."""
        check_is_fitted(self, "record_")
        return np.stack([self.record_.lambdas(i) for i in range(self.record_.num_clients)])
