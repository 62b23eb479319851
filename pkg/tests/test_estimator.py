import math

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fedmosaic import FedMosaicClassifier
from fedmosaic.protocol import ConfigError


@pytest.fixture(scope="module")
def federated(small_scenario):
    sc = small_scenario
    # non-contiguous string labels exercise the class mapping
    names = np.array(["ant", "bee", "cat", "dog"])
    Xs = [s.X for s in sc.shards]
    ys = [names[s.y] for s in sc.shards]
    evals = [(t.X, names[t.y]) for t in sc.test_sets]
    return Xs, ys, sc.pool.X, evals


def test_fit_predict(federated):
    Xs, ys, Xp, evals = federated
    clf = FedMosaicClassifier(num_rounds=6, sync_period=2, batch_size=8).fit(Xs, ys, Xp, evals)
    assert list(clf.classes_) == ["ant", "bee", "cat", "dog"]
    assert clf.n_features_in_ == Xs[0].shape[1]
    X, y = evals[1]
    pred = clf.predict(X, client=1)
    assert set(pred) <= set(clf.classes_)
    assert clf.predict_proba(X, client=1).shape == (len(X), 4)
    assert 0.0 <= clf.score(*evals[0]) <= 1.0
    lam = clf.lambdas_
    assert lam.shape == (4, 6) and np.all(lam[:, :2] == 0) and np.all(lam <= math.e)


def test_matches_engine_accuracy(federated):
    Xs, ys, Xp, evals = federated
    clf = FedMosaicClassifier(num_rounds=4, sync_period=2, batch_size=8).fit(Xs, ys, Xp, evals)
    for i, (X, y) in enumerate(evals):
        np.testing.assert_allclose(np.mean(clf.predict(X, client=i) == y),
                                   clf.record_.test_accs(i)[-1])


def test_local_only_needs_no_pool(federated):
    Xs, ys, _, _ = federated
    clf = FedMosaicClassifier(mode="local_only", num_rounds=3).fit(Xs, ys)
    assert clf.record_.total("uplink_scalars") == 0


def test_params_and_clone():
    clf = FedMosaicClassifier(num_rounds=7, dp_epsilon=2.0)
    params = clf.get_params()
    assert params["num_rounds"] == 7 and params["dp_epsilon"] == 2.0
    assert clone(clf).set_params(num_rounds=3).num_rounds == 3


def test_unfitted():
    with pytest.raises(NotFittedError):
        FedMosaicClassifier().predict(np.zeros((1, 2)))


def test_invalid_inputs(federated):
    Xs, ys, Xp, _ = federated
    with pytest.raises(ValueError):
        FedMosaicClassifier().fit(Xs, ys[:2], Xp)
    with pytest.raises(ConfigError):
        FedMosaicClassifier(mode="fedct_majority", dp_epsilon=1.0).fit(Xs, ys, Xp)
    with pytest.raises(ConfigError):
        FedMosaicClassifier().fit(Xs, ys)


def test_deterministic(federated):
    Xs, ys, Xp, _ = federated
    a = FedMosaicClassifier(num_rounds=4, random_state=3).fit(Xs, ys, Xp)
    b = FedMosaicClassifier(num_rounds=4, random_state=3, n_jobs=2).fit(Xs, ys, Xp)
    assert a.record_.rounds_csv() == b.record_.rounds_csv()
