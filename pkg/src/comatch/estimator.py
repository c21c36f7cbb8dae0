"""Scikit-learn style wrapper around the joint matching/co-segmentation model."""

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .evaluation import DEFAULT_ALPHAS, binarize
from .experiments import SYNTHETIC, evaluate_model, predict
from .geometry import apply_transform
from .objective import HyperParams, train
from .validation import check_alphas, check_pairs


class CoMatch(TransformerMixin, BaseEstimator):
    """Jointly learns pairwise alignments and co-segmentation masks.

    ``fit`` takes image pairs only (no labels).  ``predict`` returns the
    ``A -> B`` transforms, ``transform`` the soft masks as an array of shape
    ``(N, 2, H, W)`` and ``predict_masks`` their binarized versions.

    Defaults follow the desk-scale synthetic recipe; any other
    hyper-parameter can be passed through ``options``.
    """

    def __init__(
        self,
        steps=SYNTHETIC["steps"],
        learning_rate=SYNTHETIC["learning_rate"],
        batch_size=8,
        lambda_cycle=5.0,
        lambda_trans=5.0,
        lambda_contrast=10.0,
        lambda_task=10.0,
        use_matching=True,
        use_cycle=True,
        use_trans=True,
        use_contrast=True,
        use_task=True,
        binarization="otsu",
        seed=0,
        options=None,
    ):
        self.steps = steps
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.lambda_cycle = lambda_cycle
        self.lambda_trans = lambda_trans
        self.lambda_contrast = lambda_contrast
        self.lambda_task = lambda_task
        self.use_matching = use_matching
        self.use_cycle = use_cycle
        self.use_trans = use_trans
        self.use_contrast = use_contrast
        self.use_task = use_task
        self.binarization = binarization
        self.seed = seed
        self.options = options

    def hyperparams(self, image_size=None):
        params = self.get_params()
        params.pop("binarization")
        options = params.pop("options") or {}
        base = {k: v for k, v in SYNTHETIC.items() if k not in params}
        values = {**base, **params, **options}
        if image_size is not None:
            values["image_size"] = image_size
        return HyperParams.from_mapping(values)

    def fit(self, X, y=None):
        samples = check_pairs(X, stride=8)
        hp = self.hyperparams(image_size=samples[0].image_a.shape[0])
        if samples[0].image_a.shape[0] != samples[0].image_a.shape[1]:
            raise ValueError("images must be square")
        self.state_ = train(samples, hp)
        self.hyperparams_ = hp
        self.history_ = list(self.state_.history)
        self.n_pairs_seen_ = len(samples)
        return self

    def _check_fitted(self):
        if not hasattr(self, "state_"):
            raise NotFittedError("call fit before using this estimator")

    def _pairs(self, X):
        self._check_fitted()
        samples = check_pairs(X, stride=8)
        size = self.hyperparams_.image_size
        if samples[0].image_a.shape[:2] != (size, size):
            raise ValueError(f"fitted on {size}x{size} images, got {samples[0].image_a.shape[:2]}")
        return samples

    def predict(self, X):
        """List of fitted ``A -> B`` transforms, one per pair."""
        samples = self._pairs(X)
        transforms, _, _ = predict(self.state_.model, samples)
        return transforms

    def transform(self, X):
        samples = self._pairs(X)
        _, m_a, m_b = predict(self.state_.model, samples)
        return np.stack([np.stack(m_a), np.stack(m_b)], axis=1)

    def predict_masks(self, X):
        soft = self.transform(X)
        return np.array([[binarize(m, self.binarization) for m in pair] for pair in soft])

    def transfer_keypoints(self, X, keypoints):
        """Map normalized ``(K, 2)`` keypoints of each image A into image B."""
        out = []
        for T, kp in zip(self.predict(X), keypoints):
            pts = torch.as_tensor(np.asarray(kp, dtype=np.float64))
            out.append(apply_transform(T.to(torch.float64), pts).numpy())
        return out

    def evaluate(self, X, alphas=DEFAULT_ALPHAS):
        """PCK, mean endpoint error, precision and Jaccard on labelled pairs."""
        samples = self._pairs(X)
        return evaluate_model(self.state_.model, samples, check_alphas(alphas), self.binarization)

    def score(self, X, y=None):
        """PCK at alpha 0.1 on pairs carrying keypoints."""
        return self.evaluate(X).pck[0.1]
