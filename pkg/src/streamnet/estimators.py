"""scikit-learn compatible wrappers.

``IntensitySlicer`` and ``ZeroNoise`` are stateless transformers over
(N, C, H, W) image arrays; ``StreamingNetClassifier`` trains any of the three
network variants with ``fit``/``predict``/``predict_proba`` and therefore
works with ``clone``, ``GridSearchCV``, ``cross_val_score`` and friends.
"""

from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .imaging import FULL_BAND, NoiseSpec, SliceBand, corrupt_batch, make_bands, slice_image
from .model import (
    DEFAULT_FINAL_FILTERS,
    build_simple_convnet,
    build_streaming_net,
    init_state,
    predict_logits,
    validate_bands,
)
from .optim import AdamConfig
from .tensor import softmax
from .training import Trainer
from .validation import check_images, check_labels

logger = logging.getLogger(__name__)


def _resolve_bands(n_bands, bands, include_full_band) -> list[SliceBand]:
    out = [SliceBand(*b) if not isinstance(b, SliceBand) else b for b in bands] if bands is not None \
        else make_bands(n_bands)
    if include_full_band:
        out.append(FULL_BAND)
    validate_bands(out)
    return out


class IntensitySlicer(TransformerMixin, BaseEstimator):
    """Stack the intensity slices of each image: (N, C, H, W) -> (N, S, C, H, W)."""

    def __init__(self, n_bands=5, bands=None, include_full_band=False):
        self.n_bands = n_bands
        self.bands = bands
        self.include_full_band = include_full_band

    def fit(self, X, y=None):
        self.bands_ = _resolve_bands(self.n_bands, self.bands, self.include_full_band)
        self.n_features_in_ = int(np.prod(np.shape(X)[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "bands_")
        X = check_images(X)
        return np.stack([slice_image(X, b) for b in self.bands_], axis=1)


class ZeroNoise(TransformerMixin, BaseEstimator):
    """Zero a fixed fraction of spatial locations per image.

    Image ``i`` is corrupted with the sub-seed derived from ``random_state``
    and ``i`` (or ``ids[i]`` when given), so repeated calls are identical.
    Output keeps the input dtype.
    """

    def __init__(self, ratio=0.5, random_state=0):
        self.ratio = ratio
        self.random_state = random_state

    def fit(self, X, y=None):
        NoiseSpec(self.ratio, self.random_state)
        return self

    def transform(self, X, ids=None):
        X = np.asarray(X)
        ids = np.arange(len(X)) if ids is None else np.asarray(ids)
        return corrupt_batch(X, NoiseSpec(self.ratio, int(self.random_state)), ids)


class StreamingNetClassifier(ClassifierMixin, BaseEstimator):
    """Simple, wide or multi-stream conv net trained with Adam.

    Parameters
    ----------
    variant : {"streaming", "simple", "wide"}
    n_bands : int
        Number of equal intensity bands (streams) when ``bands`` is None.
    bands : list of (lo, hi) or None
        Explicit band list; must partition [0, 1].
    include_full_band : bool
        Add a whole-image stream next to the sliced ones.
    final_conv_filters : int
        Filters of the last 1x1 conv layer (10 was used for CIFAR-10).
    hidden_dense : tuple of int
        Hidden fully connected layers between the concat and the logits.
    width_multiplier : int
        Filter multiplier of the ``wide`` variant.
    learning_rate, beta1, beta2, epsilon : float
        Adam settings.
    epochs, batch_size : int
    random_state : int
        Seeds weight init and minibatch order.
    """

    def __init__(self, variant="streaming", n_bands=5, bands=None, include_full_band=False,
                 final_conv_filters=DEFAULT_FINAL_FILTERS, hidden_dense=(), width_multiplier=5,
                 learning_rate=5e-4, beta1=0.99, beta2=0.9, epsilon=1e-8,
                 epochs=10, batch_size=64, random_state=0):
        self.variant = variant
        self.n_bands = n_bands
        self.bands = bands
        self.include_full_band = include_full_band
        self.final_conv_filters = final_conv_filters
        self.hidden_dense = hidden_dense
        self.width_multiplier = width_multiplier
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def _build_spec(self, input_shape, n_classes):
        if self.variant == "simple":
            return build_simple_convnet(input_shape, n_classes, self.final_conv_filters, 1)
        if self.variant == "wide":
            return build_simple_convnet(input_shape, n_classes, self.final_conv_filters, self.width_multiplier)
        if self.variant == "streaming":
            bands = _resolve_bands(self.n_bands, self.bands, self.include_full_band)
            return build_streaming_net(input_shape, n_classes, bands, self.final_conv_filters, self.hidden_dense)
        raise ValueError(f"unknown variant {self.variant!r}")

    def fit(self, X, y):
        Xf = check_images(X)
        y = check_labels(y, len(Xf))
        self.classes_, encoded = np.unique(y, return_inverse=True)
        self.spec_ = self._build_spec(Xf.shape[1:], len(self.classes_))
        trainer = Trainer(self.spec_, init_state(self.spec_, self.random_state),
                          AdamConfig(self.learning_rate, self.beta1, self.beta2, self.epsilon))
        rng = np.random.default_rng(self.random_state)
        self.loss_curve_ = []
        for epoch in range(self.epochs):
            order = rng.permutation(len(Xf))
            total = 0.0
            for start in range(0, len(order), self.batch_size):
                idx = order[start:start + self.batch_size]
                total += trainer.train_step(Xf[idx], encoded[idx]) * len(idx)
            self.loss_curve_.append(total / len(order))
            logger.debug("epoch %d loss %.5f", epoch + 1, self.loss_curve_[-1])
        self.state_ = trainer.state
        self.n_features_in_ = int(np.prod(Xf.shape[1:]))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "state_")
        Xf = check_images(X, self.spec_.input_shape)
        return predict_logits(self.spec_, self.state_, Xf)

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        check_is_fitted(self, "state_")
        return self.classes_[self.decision_function(X).argmax(axis=1)]
