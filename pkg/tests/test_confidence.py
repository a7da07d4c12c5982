import json

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cdtrust.confidence import (
    SUPERVISED,
    UNSUPERVISED,
    SceneConfidence,
    confidence_report,
    decide_route,
    dumps_report,
    minmax,
    normalize_confidences,
    pixel_zopt,
    scene_confidence,
    zopt_map,
)
from cdtrust.exceptions import ShapeError, ValidationError
from cdtrust.raster import ChangeMask, Raster

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_pixel_zopt_is_max_logit():
    assert pixel_zopt([0.2, 3.0, -1.0]) == 3.0
    with pytest.raises(ValidationError):
        pixel_zopt([1.0])
    with pytest.raises(ValidationError):
        pixel_zopt([1.0, np.inf])


def test_scene_confidence_mean_of_max():
    lm = np.array([[[1.0, 4.0]], [[2.0, 0.0]]])  # (2, 1, 2)
    np.testing.assert_array_equal(zopt_map(lm), [[2.0, 4.0]])
    assert scene_confidence(lm).beta == 3.0
    m = ChangeMask(np.array([[255, 0]]))
    assert scene_confidence(Raster(lm), m).beta == 4.0
    with pytest.raises(ValidationError):
        scene_confidence(lm, np.zeros((1, 2), bool))
    with pytest.raises(ShapeError):
        scene_confidence(lm, np.ones((2, 2), bool))
    with pytest.raises(ShapeError):
        zopt_map(np.zeros((1, 2, 2)))


def test_confidence_is_computed_before_softmax():
    # Softmax probabilities are identical, the max logits are not.
    a = np.array([[[0.0]], [[1.0]]])
    assert scene_confidence(a + 5).beta == scene_confidence(a).beta + 5


def test_minmax_examples():
    norm, deg = minmax([2.0, 4.0, 3.0])
    np.testing.assert_array_equal(norm, [0.0, 1.0, 0.5])
    assert not deg
    norm, deg = minmax([1.5, 1.5])
    assert deg and np.all(norm == 1.0)
    with pytest.raises(ValidationError):
        minmax([])


@settings(max_examples=300)
@given(hnp.arrays(np.float64, st.integers(1, 30), elements=finite))
def test_minmax_properties(b):
    norm, deg = minmax(b)
    assert np.all((0 <= norm) & (norm <= 1))
    if deg:
        assert np.all(norm == 1)
    else:
        assert norm[np.argmax(b)] == 1.0 and norm[np.argmin(b)] == 0.0
        order = np.argsort(b, kind="stable")
        assert np.all(np.diff(norm[order]) >= 0)


@settings(max_examples=200)
@given(hnp.arrays(np.float64, st.integers(2, 10), elements=st.floats(-10, 10)), st.floats(-10, 10))
def test_minmax_shift_invariance(b, c):
    assume(np.ptp(b) > 1e-3)
    np.testing.assert_allclose(minmax(b)[0], minmax(b + c)[0], atol=1e-9)


def test_routing_threshold_inclusive():
    assert decide_route(SceneConfidence("a", 1.0, 0.5), 0.5).route == SUPERVISED
    assert decide_route(SceneConfidence("a", 1.0, 0.4999), 0.5).route == UNSUPERVISED
    assert decide_route(SceneConfidence("a", 1.0, 0.0), 0.0).route == SUPERVISED
    assert decide_route(SceneConfidence("a", 1.0, 1.0), 1.0).route == SUPERVISED
    with pytest.raises(ValidationError):
        decide_route(SceneConfidence("a", 1.0), 0.5)
    with pytest.raises(ValidationError):
        decide_route(SceneConfidence("a", 1.0, 0.3), 1.5)


def test_report_serialization():
    scs = normalize_confidences([SceneConfidence("a", 1.0), SceneConfidence("b", 3.0)])
    report = confidence_report(scs, 0.5)
    assert [r["route"] for r in report] == [UNSUPERVISED, SUPERVISED]
    assert json.loads(dumps_report(report)) == report


def test_scene_confidence_validates():
    with pytest.raises(ValidationError):
        SceneConfidence("a", float("nan"))
    with pytest.raises(ValidationError):
        SceneConfidence("a", 1.0, 1.5)
