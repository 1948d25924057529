"""scikit-learn style wrappers around the alignment and feature-statistics code."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import align_model
from .feature_align import adain_align, stats
from .similarity import apply, dis_metric, fit_sequence
from .skeleton import DEFAULT_CONF_THRESHOLD, N_KEYPOINTS, PoseSequence, check_pose


def check_pose_array(X, name="X"):
    """Coerce a pose, pose stack or `PoseSequence` to a float ``(T, 18, 3)`` array."""
    if isinstance(X, PoseSequence):
        return X.keypoints
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (N_KEYPOINTS, 3):
        raise ValueError(f"{name} must have shape (T, {N_KEYPOINTS}, 3), got {arr.shape}")
    for frame in arr:
        check_pose(frame, name)
    return arr


def check_items(items):
    items = list(items)
    if not items:
        raise ValueError("no corpus items given")
    return items


class SimilarityAligner(TransformerMixin, BaseEstimator):
    """Closed-form similarity alignment of a driven sequence to a reference pose.

    ``fit(X, y)`` takes the driven sequence ``X`` and the reference pose ``y``;
    ``transform`` applies the fitted transform to any pose array.
    """

    def __init__(self, conf_threshold=DEFAULT_CONF_THRESHOLD, mode="first"):
        self.conf_threshold = conf_threshold
        self.mode = mode

    def fit(self, X, y):
        driven = check_pose_array(X)
        reference = check_pose_array(y, "y")[0]
        self.transform_ = fit_sequence(reference, driven, self.mode, self.conf_threshold)
        self.reference_ = reference
        return self

    def transform(self, X):
        check_is_fitted(self, "transform_")
        out = apply(self.transform_, check_pose_array(X))
        return out[0] if np.asarray(X).ndim == 2 else out

    def score(self, X, y):
        """Negative Dis between the aligned ``X`` and target poses ``y``."""
        return -dis_metric(self.transform(X), check_pose_array(y, "y"))


class LearnedAligner(BaseEstimator):
    """SVD-guided learned alignment trained on corpus items.

    ``predict`` returns one `SimTransform` per item; ``transform`` returns the
    aligned driven keypoint arrays.
    """

    def __init__(self, epochs=50, batch_size=32, lr=1e-3, seed=0,
                 conf_threshold=DEFAULT_CONF_THRESHOLD, d_model=64, n_heads=4,
                 ffn_hidden=256, n_encoder=2, n_fusion=4, head_hidden=64, use_pos_embed=True):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.conf_threshold = conf_threshold
        self.d_model = d_model
        self.n_heads = n_heads
        self.ffn_hidden = ffn_hidden
        self.n_encoder = n_encoder
        self.n_fusion = n_fusion
        self.head_hidden = head_hidden
        self.use_pos_embed = use_pos_embed

    def _model_config(self):
        return align_model.ModelConfig(self.d_model, self.n_heads, self.ffn_hidden,
                                       self.n_encoder, self.n_fusion, self.head_hidden,
                                       self.use_pos_embed)

    def _train_config(self):
        return align_model.TrainConfig(self.epochs, self.batch_size, self.lr, self.seed,
                                       self.conf_threshold)

    def fit(self, items, y=None, splits=None):
        items = check_items(items)
        self.params_, self.history_ = align_model.train(
            items, self._train_config(), self._model_config(), splits)
        return self

    def init_untrained(self):
        """Use fresh parameters, which reproduce the closed-form fit exactly."""
        self.params_ = align_model.init_params(self.seed, self._model_config())
        self.history_ = []
        return self

    def predict(self, items):
        check_is_fitted(self, "params_")
        batch = align_model.batch_from_items(check_items(items), self.conf_threshold)
        return align_model.transforms_from_batch(self.params_, batch, self._model_config())

    def transform(self, items):
        items = check_items(items)
        return [apply(T, it.driven.keypoints) for T, it in zip(self.predict(items), items)]

    def score(self, items, y=None):
        """Negative mean Dis against each item's ``gt_aligned``."""
        items = check_items(items)
        aligned = self.transform(items)
        return -float(np.mean([dis_metric(a, it.gt_aligned.keypoints)
                               for a, it in zip(aligned, items)]))


class DistributionAligner(TransformerMixin, BaseEstimator):
    """Re-standardize tensors to the statistics of the tensor seen in ``fit``."""

    def __init__(self, add_residual=False):
        self.add_residual = add_residual

    def fit(self, X, y=None):
        self.reference_ = np.array(X, dtype=np.float64)
        self.stats_ = stats(self.reference_)
        return self

    def transform(self, X):
        check_is_fitted(self, "reference_")
        aligned, combined = adain_align(X, self.reference_)
        return combined if self.add_residual else aligned
