"""scikit-learn style estimators over bi-temporal scenes.

``X`` is a sequence of scenes: :class:`~cdtrust.raster.ScenePair` objects,
``(pre, post)`` pairs of ``(B, h, w)`` arrays, or ``(2, B, h, w)`` arrays.
``y``, when given, is one ``(h, w)`` label array per scene. Scenes may differ
in size, so predictions come back as lists of arrays.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .confidence import DEFAULT_TAU, SUPERVISED, UNSUPERVISED, minmax, scene_confidence
from .fcn import FcnConfig, forward_logits, predict_from_logits
from .metrics import ConfusionMatrix, confusion, kappa
from .pipeline import run_pipeline
from .raster import compute_norm_stats, normalize_scene
from .training import TrainConfig, train
from .unsupervised import cva_magnitude, is_degenerate, otsu_threshold, threshold_map
from .validation import check_scenes, check_tau


class BandStandardizer(TransformerMixin, BaseEstimator):
    """Per-band standardization with statistics pooled over pre and post images."""

    def fit(self, X, y=None):
        scenes = check_scenes(X)
        self.stats_ = compute_norm_stats(scenes)
        self.n_bands_in_ = self.stats_.band_count
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        return [normalize_scene(s, self.stats_) for s in check_scenes(X)]


class FcnChangeDetector(ClassifierMixin, BaseEstimator):
    """Early-fusion FCN change detector.

    Parameters mirror :class:`~cdtrust.fcn.FcnConfig` and
    :class:`~cdtrust.training.TrainConfig`; ``random_state`` seeds both the
    weight initialization and patch sampling.
    """

    def __init__(self, base_channels=16, depth=3, num_change_classes=1, learning_rate=1e-3,
                 epochs=10, patch_size=64, batch_size=8, patches_per_scene=32,
                 class_weighting="inverse_frequency", augment="d4", random_state=0):
        self.base_channels = base_channels
        self.depth = depth
        self.num_change_classes = num_change_classes
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.patch_size = patch_size
        self.batch_size = batch_size
        self.patches_per_scene = patches_per_scene
        self.class_weighting = class_weighting
        self.augment = augment
        self.random_state = random_state

    def _configs(self, bands):
        seed = 0 if self.random_state is None else int(self.random_state)
        mcfg = FcnConfig(bands, self.num_change_classes + 1, self.base_channels, self.depth, seed)
        tcfg = TrainConfig(self.learning_rate, self.epochs, self.patch_size, self.batch_size,
                           self.patches_per_scene, self.class_weighting, self.augment, seed)
        return mcfg, tcfg

    def fit(self, X, y=None):
        scenes = check_scenes(X, y, require_labels=True, split="train")
        mcfg, tcfg = self._configs(scenes[0].bands)
        self.model_, self.report_ = train(scenes, mcfg, tcfg)
        self.classes_ = np.arange(mcfg.num_classes)
        self.n_bands_in_ = mcfg.in_bands
        return self

    @classmethod
    def from_model(cls, model, **params):
        """Wrap an already trained :class:`~cdtrust.fcn.FcnModel`."""
        cfg = model.config
        est = cls(base_channels=cfg.base_channels, depth=cfg.depth,
                  num_change_classes=cfg.num_classes - 1, random_state=cfg.seed, **params)
        est.model_ = model
        est.report_ = None
        est.classes_ = np.arange(cfg.num_classes)
        est.n_bands_in_ = cfg.in_bands
        return est

    def decision_function(self, X):
        """Raw per-pixel logits, one ``(K+1, h, w)`` array per scene."""
        check_is_fitted(self, "model_")
        return [forward_logits(self.model_, s.pre, s.post).data for s in check_scenes(X)]

    def predict(self, X):
        return [predict_from_logits(z).labels for z in self.decision_function(X)]

    def confidence(self, X):
        """Scene confidence: mean over pixels of the largest logit."""
        check_is_fitted(self, "model_")
        scenes = check_scenes(X)
        return np.array([
            scene_confidence(forward_logits(self.model_, s.pre, s.post), s.mask, s.scene_id).beta
            for s in scenes
        ])

    def score(self, X, y=None, sample_weight=None):
        """Kappa of pooled confusion counts over all scenes."""
        scenes = check_scenes(X, y, require_labels=True)
        preds = self.predict(scenes)
        return kappa(ConfusionMatrix.pooled(confusion(p, s.mask) for p, s in zip(preds, scenes)))


class CvaOtsuDetector(BaseEstimator):
    """Change vector analysis magnitude thresholded per scene by Otsu's method.

    ``fit`` only estimates the per-band scale used to standardize differences;
    no labels are used.
    """

    def __init__(self, bins=256):
        self.bins = bins

    def fit(self, X, y=None):
        self.stats_ = compute_norm_stats(check_scenes(X))
        self.n_bands_in_ = self.stats_.band_count
        return self

    def magnitude(self, X):
        check_is_fitted(self, "stats_")
        return [cva_magnitude(s.pre, s.post, self.stats_).data[0] for s in check_scenes(X)]

    def thresholds(self, X):
        return np.array([otsu_threshold(m, self.bins) for m in self.magnitude(X)])

    def predict(self, X):
        out = []
        degenerate = []
        for m in self.magnitude(X):
            degenerate.append(is_degenerate(m))
            out.append(threshold_map(m, otsu_threshold(m, self.bins)).labels)
        self.degenerate_ = degenerate
        return out

    def fit_predict(self, X, y=None):
        return self.fit(X).predict(X)


class ConfidenceRouter(TransformerMixin, BaseEstimator):
    """Min-max normalize scene confidences and route scenes against ``tau``.

    ``fit`` takes scene confidences (floats) or logit maps and remembers the
    extremes; ``transform`` maps confidences into [0, 1] with them.
    """

    def __init__(self, tau=DEFAULT_TAU):
        self.tau = tau

    @staticmethod
    def _betas(X):
        betas = []
        for x in X:
            a = np.asarray(x, dtype=np.float64)
            betas.append(float(a) if a.ndim == 0 else scene_confidence(a).beta)
        return np.array(betas)

    def fit(self, X, y=None):
        b = self._betas(X)
        _, self.degenerate_ = minmax(b)
        self.min_, self.max_ = float(b.min()), float(b.max())
        return self

    def transform(self, X):
        check_is_fitted(self, "min_")
        b = self._betas(X)
        if self.degenerate_:
            return np.ones_like(b)
        return np.clip((b - self.min_) / (self.max_ - self.min_), 0.0, 1.0)

    def predict(self, X):
        tau = check_tau(self.tau)
        return np.where(self.transform(X) >= tau, SUPERVISED, UNSUPERVISED)


class RoutedChangeDetector(BaseEstimator):
    """Supervised FCN with per-scene fallback to CVA+Otsu when its confidence is low.

    ``assume_diverse=True`` declares the training set large and diverse, in
    which case every scene goes to the supervised model.
    """

    def __init__(self, detector=None, tau=DEFAULT_TAU, assume_diverse=False):
        self.detector = detector
        self.tau = tau
        self.assume_diverse = assume_diverse

    def fit(self, X, y=None):
        det = self.detector if self.detector is not None else FcnChangeDetector()
        self.detector_ = det.fit(X, y)
        return self

    def route(self, X):
        """Per-scene outcomes (route, masks, confidence) of the decision flow."""
        check_is_fitted(self, "detector_")
        return run_pipeline(self.detector_.model_, check_scenes(X), check_tau(self.tau), self.assume_diverse)

    def predict(self, X):
        return [o.mask.labels for o in self.route(X)]

    def score(self, X, y=None):
        scenes = check_scenes(X, y, require_labels=True)
        preds = self.predict(scenes)
        return kappa(ConfusionMatrix.pooled(confusion(p, s.mask) for p, s in zip(preds, scenes)))
