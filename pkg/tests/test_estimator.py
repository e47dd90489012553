import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from caplab.estimator import CAPClassifier

TINY = dict(epochs=1, batch_size=4, train_steps=1, patch_size=4, embed_dim=16, num_heads=2, depth=1)


def images(n=8, seed=0):
    return np.random.default_rng(seed).random((n, 16, 16)).astype(np.float32)


def test_params_round_trip():
    est = CAPClassifier(**TINY)
    assert est.get_params()["embed_dim"] == 16
    assert clone(est).get_params() == est.get_params()
    est.set_params(mode="trades")
    assert est.to_plan().mode == "trades"


@pytest.mark.parametrize("mode", ["vanilla", "trades", "cap"])
def test_fit_predict_maps_labels_back(mode):
    X = images()
    y = np.array(["neg", "pos"] * 4)
    est = CAPClassifier(mode=mode, **TINY).fit(X, y)
    assert list(est.classes_) == ["neg", "pos"]
    assert est.n_features_in_ == 256 and len(est.history_) == 1
    proba = est.predict_proba(X)
    assert proba.shape == (8, 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, rtol=1e-5)
    assert set(est.predict(X)) <= {"neg", "pos"}
    assert 0.0 <= est.score(X, y) <= 1.0


def test_fit_is_seeded():
    X, y = images(), np.arange(8) % 2
    a = CAPClassifier(**TINY, random_state=3).fit(X, y).predict_proba(X)
    b = CAPClassifier(**TINY, random_state=3).fit(X, y).predict_proba(X)
    np.testing.assert_array_equal(a, b)


def test_unfitted_predict():
    with pytest.raises(NotFittedError):
        CAPClassifier().predict(images(2))


def test_input_validation():
    est = CAPClassifier(**TINY)
    with pytest.raises(ValueError):
        est.fit(images(), np.zeros(8))
    with pytest.raises(ValueError):
        est.fit(images() * 3, np.arange(8) % 2)
    with pytest.raises(ValueError):
        est.fit(np.zeros((4, 16, 12), np.float32), np.arange(4) % 2)
    with pytest.raises(ValueError):
        est.fit(images(), np.arange(7) % 2)
