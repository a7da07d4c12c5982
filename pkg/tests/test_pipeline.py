import numpy as np
import pytest
from sklearn.base import clone

from cdtrust.confidence import SUPERVISED, UNSUPERVISED
from cdtrust.estimators import (
    BandStandardizer,
    ConfidenceRouter,
    CvaOtsuDetector,
    FcnChangeDetector,
    RoutedChangeDetector,
)
from cdtrust.exceptions import ShapeError, ValidationError
from cdtrust.fcn import FcnConfig, encode_model
from cdtrust.pipeline import run_pipeline
from cdtrust.training import TrainConfig, train
from cdtrust.unsupervised import unsupervised_change_map

from conftest import make_scene

MODEL = FcnConfig(4, 2, 2, 1, seed=0)
TRAIN = TrainConfig(1e-2, epochs=3, patch_size=8, batch_size=4, patches_per_scene_per_epoch=4, seed=0)


@pytest.fixture(scope="module")
def trained():
    scenes = [make_scene("tr0", seed=10), make_scene("tr1", seed=11)]
    model, _ = train(scenes, MODEL, TRAIN)
    return model


@pytest.fixture(scope="module")
def test_scenes():
    return [make_scene(f"te{i}", seed=20 + i, split="test", change=0.1 + 0.1 * i) for i in range(4)]


def test_routes_follow_tau(trained, test_scenes):
    out = run_pipeline(trained, test_scenes, tau=0.5)
    for o in out:
        expected = SUPERVISED if o.confidence.beta_norm >= 0.5 else UNSUPERVISED
        assert o.route == expected
        assert o.mask == (o.supervised if o.route == SUPERVISED else o.unsupervised)
    norms = [o.confidence.beta_norm for o in out]
    assert min(norms) == 0.0 and max(norms) == 1.0


def test_extreme_taus(trained, test_scenes):
    assert all(o.route == SUPERVISED for o in run_pipeline(trained, test_scenes, tau=0.0))
    routes = [o.route for o in run_pipeline(trained, test_scenes, tau=1.0)]
    assert routes.count(SUPERVISED) == 1


def test_assume_diverse_skips_fallback(trained, test_scenes):
    out = run_pipeline(trained, test_scenes, tau=1.0, assume_diverse=True)
    assert all(o.route == SUPERVISED and o.unsupervised is None for o in out)


def test_fallback_map_uses_model_stats(trained, test_scenes):
    out = run_pipeline(trained, test_scenes, tau=0.5, always_unsupervised=True)
    s = test_scenes[0]
    assert out[0].unsupervised == unsupervised_change_map(s.pre, s.post, trained.norm_stats)


def test_single_scene_is_degenerate_and_supervised(trained, test_scenes):
    (o,) = run_pipeline(trained, test_scenes[:1], tau=1.0)
    assert o.confidence.degenerate and o.route == SUPERVISED


def test_pipeline_validation(trained, test_scenes):
    with pytest.raises(ValidationError):
        run_pipeline(trained, test_scenes, tau=1.2)
    with pytest.raises(ValidationError):
        run_pipeline(trained, [], tau=0.5)


def test_pipeline_rerun_identical(trained, test_scenes):
    a = run_pipeline(trained, test_scenes)
    b = run_pipeline(trained, test_scenes)
    assert [o.mask.labels.tobytes() for o in a] == [o.mask.labels.tobytes() for o in b]


# sklearn-style wrappers


def _xy(scenes):
    return [(s.pre.data, s.post.data) for s in scenes], [s.mask.labels for s in scenes]


def test_fcn_estimator_params_and_clone():
    est = FcnChangeDetector(base_channels=2, depth=1, epochs=1, patch_size=8)
    p = est.get_params()
    assert p["base_channels"] == 2 and p["random_state"] == 0
    c = clone(est)
    assert c.get_params() == p and not hasattr(c, "model_")


def test_fcn_estimator_matches_functional(test_scenes):
    X, y = _xy(test_scenes[:2])
    est = FcnChangeDetector(base_channels=2, depth=1, learning_rate=1e-2, epochs=3, patch_size=8,
                            batch_size=4, patches_per_scene=4, random_state=0).fit(X, y)
    model, _ = train([s for s in est_scenes(test_scenes[:2])], MODEL, TRAIN)
    assert encode_model(est.model_) == encode_model(model)
    preds = est.predict(X)
    assert preds[0].shape == (16, 16) and preds[0].dtype == np.uint8
    assert est.decision_function(X)[0].shape == (2, 16, 16)
    assert est.confidence(X).shape == (2,)
    assert -1.0 <= est.score(X, y) <= 1.0
    wrapped = FcnChangeDetector.from_model(model)
    np.testing.assert_array_equal(wrapped.predict(X)[0], preds[0])


def est_scenes(scenes):
    from dataclasses import replace
    return [replace(s, scene_id=f"sample{i:04d}", group="", split="train") for i, s in enumerate(scenes)]


def test_estimator_input_validation(test_scenes):
    est = FcnChangeDetector()
    with pytest.raises(ValidationError):
        est.fit([(np.zeros((4, 8, 8)), np.zeros((4, 8, 8)))])
    with pytest.raises(ValidationError):
        est.fit([], [])
    with pytest.raises(ValidationError):
        est.fit([np.zeros((3, 8, 8))], [np.zeros((8, 8))])
    with pytest.raises(ShapeError):
        CvaOtsuDetector().fit([(np.zeros((4, 8, 8)), np.zeros((4, 8, 8))),
                               (np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))])


def test_cva_estimator(test_scenes):
    X = np.stack([np.stack([s.pre.data, s.post.data]) for s in test_scenes])
    det = CvaOtsuDetector().fit(X)
    preds = det.predict(X)
    assert len(preds) == 4 and det.degenerate_ == [False] * 4
    assert det.thresholds(X).shape == (4,)
    np.testing.assert_array_equal(det.fit_predict(X)[0], preds[0])


def test_band_standardizer(test_scenes):
    X, _ = _xy(test_scenes)
    out = BandStandardizer().fit_transform(X)
    pooled = np.concatenate([np.concatenate([s.pre.data, s.post.data], axis=2) for s in out], axis=2)
    np.testing.assert_allclose(pooled.reshape(4, -1).mean(axis=1), 0, atol=1e-5)
    np.testing.assert_allclose(pooled.reshape(4, -1).std(axis=1), 1, atol=1e-4)


def test_confidence_router():
    r = ConfidenceRouter(tau=0.5).fit([1.0, 3.0, 2.0])
    np.testing.assert_allclose(r.transform([1.0, 3.0, 2.0]), [0, 1, 0.5])
    assert list(r.predict([1.0, 2.5])) == [UNSUPERVISED, SUPERVISED]
    r2 = ConfidenceRouter().fit([2.0, 2.0])
    assert np.all(r2.transform([2.0, 5.0]) == 1.0)
    with pytest.raises(ValidationError):
        ConfidenceRouter(tau=2).fit([1.0, 2.0]).predict([1.0])


def test_routed_detector(test_scenes):
    X, y = _xy(test_scenes)
    det = FcnChangeDetector(base_channels=2, depth=1, epochs=1, patch_size=8, patches_per_scene=2)
    rd = RoutedChangeDetector(det, tau=0.5).fit(X[:2], y[:2])
    outs = rd.route(X)
    assert {o.route for o in outs} <= {SUPERVISED, UNSUPERVISED}
    assert len(rd.predict(X)) == 4
    assert -1.0 <= rd.score(X, y) <= 1.0
    diverse = RoutedChangeDetector(det, assume_diverse=True).fit(X[:2], y[:2])
    assert all(o.route == SUPERVISED for o in diverse.route(X))
