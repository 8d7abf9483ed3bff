import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ctd2gan.config import PRESETS
from ctd2gan.data import synth_generate
from ctd2gan.estimator import AnomalyDetector, as_dataset, check_frames

SMALL = dict(channel_scale=0.125, head_channels=2, max_steps=2, epochs=1)


def test_params_round_trip_through_clone():
    est = AnomalyDetector(epochs=7, seed=3)
    params = est.get_params()
    assert params["epochs"] == 7 and params["seed"] == 3 and params["lr"] == 0.0002
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    assert est.set_params(threshold=0.2).threshold == 0.2


@pytest.mark.parametrize("bad,match", [
    (np.zeros((4, 8, 8, 3)), "shape"),
    (np.full((4, 8, 8), np.nan), "NaN"),
    (np.full((4, 8, 8), 2.0), r"\[0, 1\]"),
    (np.array([["a"]]), "shape"),
])
def test_frame_validation(bad, match):
    with pytest.raises(ValueError, match=match):
        check_frames(bad)


def test_raw_frames_become_one_clip_with_estimated_flow():
    frames = np.random.default_rng(0).uniform(size=(7, 16, 16))
    ds = as_dataset(frames)
    assert ds.clips == ((0, 7),) and ds.flows.shape == (7, 16, 16, 3)
    assert np.all(ds.flows[0] == 0) and np.all(ds.labels == 0)


def test_unfitted_estimator_refuses_to_score():
    with pytest.raises(NotFittedError):
        AnomalyDetector().score_samples(np.zeros((6, 32, 32)))


@pytest.fixture(scope="module")
def fitted():
    train = synth_generate(PRESETS["tiny"]["train"], seed=0)
    return AnomalyDetector(**SMALL).fit(train)


def test_fit_score_predict(fitted):
    test = synth_generate(PRESETS["tiny"]["test"], seed=0)
    r = fitted.score_samples(test)
    assert len(r) == sum(b - a - 5 for a, b in test.clips)
    assert np.all((r >= 0) & (r <= 1))
    pred = fitted.predict(test)
    np.testing.assert_array_equal(pred, (r < fitted.threshold).astype(int))
    assert 0.0 <= fitted.score(test) <= 1.0
    assert len(fitted.loss_log_) == 2
    assert fitted.models.cfg.resolution == 32


def test_fitting_raw_frames_and_rejecting_other_extents(fitted):
    frames = np.asarray(synth_generate(PRESETS["tiny"]["train"], seed=1).frames)
    est = AnomalyDetector(**SMALL).fit(frames)
    assert len(est.score_samples(frames)) == len(frames) - 5
    with pytest.raises(ValueError, match="extent"):
        fitted.score_samples(np.zeros((8, 16, 16)))
