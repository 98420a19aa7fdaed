import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from macsswin.estimators import MacsSwinClassifier, VidMacsSwinClassifier
from macsswin.exceptions import ParameterError, ShapeError, ValidationError


def _frames(n=16, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 256, size=(n, 64, 64, 3), dtype=np.uint8)
    y = np.array(["X", "X", "X", "Y"] * (n // 4))
    X[y == "Y", 16:40, 16:40] = (240, 210, 60)
    return X, y


@pytest.fixture(scope="module")
def fitted():
    X, y = _frames()
    return MacsSwinClassifier(epochs=2, batch_size=8, augment=False).fit(X, y), X, y


def test_params_round_trip():
    est = MacsSwinClassifier(epochs=3, loss_weights=(0.2, 0.8))
    assert clone(est).get_params() == est.get_params()
    assert est.set_params(decision_threshold=0.3).decision_threshold == 0.3


def test_fit_outputs(fitted):
    est, X, y = fitted
    assert list(est.classes_) == ["X", "Y"]
    assert est.loss_weights_ == (0.25, 0.75)
    assert len([r for r in est.history_ if r["split"] == "train"]) == 2
    proba = est.predict_proba(X)
    assert proba.shape == (16, 2)
    np.testing.assert_allclose(proba.sum(1), 1.0, atol=1e-6)
    assert set(est.predict(X)) <= {"X", "Y"}
    assert est.transform(X).shape == (16, est.n_features_out_)
    margin = est.decision_function(X)
    np.testing.assert_allclose(1 / (1 + np.exp(-margin)), proba[:, 1], atol=1e-5)


def test_threshold_moves_predictions(fitted):
    est, X, _ = fitted
    p = est.predict_proba(X)[:, 1]
    lo = clone(est).set_params(decision_threshold=0.01)
    lo.model_, lo.classes_ = est.model_, est.classes_
    assert (lo.predict(X) == "Y").sum() >= (est.predict(X) == "Y").sum()
    assert np.array_equal(lo.predict(X) == "Y", p >= 0.01)
    lo.decision_threshold = 1.0
    with pytest.raises(ParameterError):
        lo.predict(X)


def test_deterministic_fit():
    X, y = _frames(8, seed=1)
    a = MacsSwinClassifier(epochs=1, batch_size=4, random_state=3).fit(X, y)
    b = MacsSwinClassifier(epochs=1, batch_size=4, random_state=3).fit(X, y)
    np.testing.assert_array_equal(a.predict_proba(X), b.predict_proba(X))


def test_input_errors():
    est = MacsSwinClassifier(epochs=1)
    X, y = _frames(4)
    with pytest.raises(NotFittedError):
        est.predict_proba(X)
    with pytest.raises(ShapeError):
        est.fit(X[:, :32, :32], y)
    with pytest.raises(ValidationError):
        est.fit(X, np.array(["X", "Y", "Z", "X"]))
    with pytest.raises(ValidationError):
        est.fit(X.astype(float) * 2, y)


def test_video_classifier():
    rng = np.random.default_rng(0)
    X = rng.integers(0, 256, size=(4, 8, 64, 64, 3), dtype=np.uint8)
    y = np.array([0, 1, 0, 1])
    est = VidMacsSwinClassifier(epochs=1, batch_size=2, augment=False).fit(X, y)
    assert est.predict_proba(X).shape == (4, 2)
    assert set(est.predict(X)) <= {0, 1}
    with pytest.raises(ShapeError):
        est.predict(X[:, :7])
