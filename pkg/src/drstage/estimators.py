"""scikit-learn style wrappers so the pipeline composes with that ecosystem.

FundusPreprocessor is a stateless transformer over image batches; the two
classifiers wrap ensemble training behind the usual fit/predict surface and
inherit get_params/set_params (and thus clone/grid-search compatibility)
from BaseEstimator. X is always a (n, size, size, 3) image array with values
in 0..255; y holds stage labels 0..4.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import models, training
from .ensemble import CASCADE_STAGE_ORDER, OVO_PAIRS, CascadePredictor, OvoPredictor
from .errors import ShapeMismatch
from .preprocess import PreprocessConfig, RasterImage, preprocess_fundus, resize_bilinear


def check_image_array(X, size=None) -> np.ndarray:
    """Validate a (n, h, w, 3) batch; returns float32 without copying if possible."""
    X = np.asarray(X)
    if X.ndim != 4 or X.shape[3] != 3:
        raise ShapeMismatch(f"X must be (n, h, w, 3), got {X.shape}")
    if size is not None and X.shape[1:3] != (size, size):
        raise ShapeMismatch(f"X must be (n, {size}, {size}, 3), got {X.shape}")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise ShapeMismatch("X contains NaN or Inf")
    return X


def check_labels(y, n) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (n,):
        raise ShapeMismatch(f"y must be ({n},), got {y.shape}")
    if y.min() < 0 or y.max() > 4:
        raise ShapeMismatch("labels must be stages 0..4")
    return y


class FundusPreprocessor(BaseEstimator, TransformerMixin):
    """Stateless transformer applying the full preprocessing pipeline."""

    def __init__(self, scale=300.0, black_threshold=50, mask_fraction=0.9,
                 intermediate_size=512, output_size=200):
        self.scale = scale
        self.black_threshold = black_threshold
        self.mask_fraction = mask_fraction
        self.intermediate_size = intermediate_size
        self.output_size = output_size

    def fit(self, X, y=None):
        return self

    def transform(self, X) -> np.ndarray:
        cfg = PreprocessConfig(
            scale=self.scale,
            black_threshold=self.black_threshold,
            mask_fraction=self.mask_fraction,
            intermediate_size=self.intermediate_size,
        )
        X = np.asarray(X)
        if X.ndim != 4 or X.shape[3] != 3:
            raise ShapeMismatch(f"X must be (n, h, w, 3), got {X.shape}")
        out = np.empty((X.shape[0], self.output_size, self.output_size, 3), dtype=np.uint8)
        for i in range(X.shape[0]):
            img = preprocess_fundus(RasterImage(X[i].astype(np.uint8)), cfg)
            out[i] = resize_bilinear(img, self.output_size, self.output_size).pixels
        return out


class _StageClassifier(BaseEstimator, ClassifierMixin):
    """Shared fit/predict plumbing of the two ensemble classifiers."""

    def _train_config(self, seed):
        raise NotImplementedError

    def _fit_ensemble(self, X, y):
        raise NotImplementedError

    def fit(self, X, y):
        X = check_image_array(X, self.input_size)
        y = check_labels(y, X.shape[0])
        self.classes_ = np.arange(5)
        self.predictor_ = self._fit_ensemble(X, y)
        return self

    def _require_fitted(self):
        if not hasattr(self, "predictor_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet")

    def predict(self, X) -> np.ndarray:
        self._require_fitted()
        return self.predictor_.predict(check_image_array(X, self.input_size))

    def predict_scores(self, X) -> np.ndarray:
        """Per-stage ensemble scores, shape (n, 5)."""
        self._require_fitted()
        return self.predictor_.class_scores(check_image_array(X, self.input_size))


class CascadeStageClassifier(_StageClassifier):
    """Four one-vs-normal heads over a seeded stub feature extractor,
    consulted most-severe-first at prediction time."""

    def __init__(self, input_size=64, feature_dim=256, seed=0, max_epochs=20,
                 batch_size=10, init_lr=0.0001, loss="hinge",
                 early_stop_value=0.95, patience=40):
        self.input_size = input_size
        self.feature_dim = feature_dim
        self.seed = seed
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.init_lr = init_lr
        self.loss = loss
        self.early_stop_value = early_stop_value
        self.patience = patience

    def _train_config(self, seed):
        return training.transfer_head_config(
            init_lr=self.init_lr,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            early_stop_value=self.early_stop_value,
            patience=self.patience,
            loss=self.loss,
            seed=seed,
        )

    def _fit_ensemble(self, X, y):
        extractor = models.StubFeatureExtractor(
            self.seed, (self.input_size, self.input_size), self.feature_dim
        )
        features = (extractor.extract(X), y)
        heads = {}
        for stage in (1, 2, 3, 4):
            head = models.init_weights(
                models.build_binary_head(self.feature_dim), self.seed + stage
            )
            training.fit_binary_pair(head, features, features, 0, stage,
                                     self._train_config(self.seed + stage))
            heads[stage] = head
        return CascadePredictor([heads[s] for s in CASCADE_STAGE_ORDER], extractor)


class OvoStageClassifier(_StageClassifier):
    """Ten pairwise small-inception networks with score-sum aggregation."""

    def __init__(self, input_size=64, width_scale=0.25, seed=0, max_epochs=10,
                 batch_size=10, init_lr=0.0001, loss="hinge",
                 early_stop_value=0.999, patience=50):
        self.input_size = input_size
        self.width_scale = width_scale
        self.seed = seed
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.init_lr = init_lr
        self.loss = loss
        self.early_stop_value = early_stop_value
        self.patience = patience

    def _train_config(self, seed):
        return training.TrainConfig(
            epochs_drop=7,
            init_lr=self.init_lr,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            early_stop_value=self.early_stop_value,
            patience=self.patience,
            loss=self.loss,
            seed=seed,
        )

    def _fit_ensemble(self, X, y):
        nets = []
        for i, (a, b) in enumerate(OVO_PAIRS):
            net = models.init_weights(
                models.build_small_inception(
                    (self.input_size, self.input_size), 3, 2, width_scale=self.width_scale
                ),
                self.seed + i,
            )
            training.fit_binary_pair(net, (X, y), (X, y), a, b,
                                     self._train_config(self.seed + i))
            nets.append(net)
        return OvoPredictor(nets)
