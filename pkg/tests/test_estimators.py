import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from wavenilm.estimators import Seq2PointClassifier, Seq2PointRegressor
from wavenilm.synth import PRESET_TEMPLATES, SyntheticScenario, generate

FAST = dict(layers=3, target_field=5, residual_channels=4, skip_channels=4, max_iter=20, eval_every=10,
            batch_size=16)


@pytest.fixture(scope="module")
def series():
    hh = generate(SyntheticScenario(3000, [PRESET_TEMPLATES["kettle"]], seed=4,
                                    schedule={"kettle": [(s, 150) for s in range(100, 3000, 300)]}))
    return hh.aggregate, hh.appliances["kettle"]


def test_params_round_trip():
    est = Seq2PointRegressor(layers=4, max_iter=7)
    params = est.get_params()
    assert params["layers"] == 4 and params["max_iter"] == 7 and params["learning_rate"] == 0.001
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(target_field=100)
    assert est.target_field == 100


def test_classifier_defaults():
    est = Seq2PointClassifier()
    assert est.get_params()["cutoff"] == 0.3 and est.batch_size == 128


def test_not_fitted():
    with pytest.raises(NotFittedError):
        Seq2PointRegressor().predict(np.ones(50))


def test_regressor_fit_predict(series):
    agg, kettle = series
    est = Seq2PointRegressor(**FAST).fit(agg, kettle)
    assert est.n_iter_ == 20
    pred = est.predict(agg)
    assert pred.shape == agg.shape
    ok = ~np.isnan(pred)
    assert ok.sum() == ((len(agg) - 19) // 5 + 1) * 5
    assert np.all(pred[ok] >= 0)
    assert est.score(agg, kettle) <= 0


def test_column_vector_accepted(series):
    agg, kettle = series
    est = Seq2PointRegressor(**FAST).fit(agg[:, None], kettle[:, None])
    assert est.predict(agg[:, None]).shape == agg.shape


def test_classifier_fit_predict(series):
    agg, kettle = series
    est = Seq2PointClassifier(threshold=2000, **FAST).fit(agg, kettle)
    np.testing.assert_array_equal(est.classes_, [0, 1])
    proba = est.predict_proba(agg)
    assert proba.shape == (len(agg), 2)
    ok = ~np.isnan(proba[:, 1])
    np.testing.assert_allclose(proba[ok].sum(axis=1), 1.0)
    states = est.predict(agg)
    assert set(np.unique(states)) <= {-1, 0, 1}
    assert np.array_equal(states == -1, ~ok)
    assert 0 <= est.score(agg, kettle) <= 1


def test_classifier_needs_states_or_threshold(series):
    agg, kettle = series
    with pytest.raises(ValueError, match="threshold"):
        Seq2PointClassifier(**FAST).fit(agg, kettle)
    Seq2PointClassifier(**FAST).fit(agg, (kettle >= 2000).astype(int))


def test_input_validation(series):
    agg, kettle = series
    with pytest.raises(ValueError):
        Seq2PointRegressor(**FAST).fit(agg, kettle[:-1])
    bad = agg.copy()
    bad[3] = np.nan
    with pytest.raises(ValueError, match="NaN"):
        Seq2PointRegressor(**FAST).fit(bad, kettle)
    with pytest.raises(ValueError, match="negative"):
        Seq2PointRegressor(**FAST).fit(-agg, kettle)
    with pytest.raises(ValueError, match="no valid training window"), pytest.warns(UserWarning):
        Seq2PointRegressor(**FAST).fit(np.arange(10.0) + 100, np.arange(10.0))


def test_same_seed_same_model(series):
    agg, kettle = series
    a = Seq2PointRegressor(**FAST).fit(agg, kettle)
    b = Seq2PointRegressor(**FAST).fit(agg, kettle)
    assert a.model_.to_bytes() == b.model_.to_bytes()
