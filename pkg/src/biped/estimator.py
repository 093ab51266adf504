"""scikit-learn style wrapper: fit / predict / score around BiPedModel."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import BiPedConfig
from .metrics import ade_fde
from .model import BiPedModel
from .objective import LossWeights, TrainSchedule, fit, predict
from .validation import check_dataset, check_split


class BiPedEstimator(BaseEstimator):
    """Trains BiPed on a Dataset.

    ``fit(X)`` takes a Dataset (or a path to a manifest) and trains on its
    ``train`` split, validating on ``val``. Unlike tabular estimators the
    targets live inside the samples, so ``y`` is ignored.
    """

    def __init__(self, config=None, seed=0, epochs=300, batch_size=8, lr=1e-4,
                 clip_norm=5.0, alpha=0.6, beta=1.0, gamma=1.0, eval_every=1):
        self.config = config
        self.seed = seed
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.clip_norm = clip_norm
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.eval_every = eval_every

    def _schedule(self):
        return TrainSchedule(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                             clip_norm=self.clip_norm, eval_every=self.eval_every)

    def fit(self, X, y=None, train_split="train", val_split="val"):
        ds = check_dataset(X)
        config = self.config if self.config is not None else BiPedConfig()
        train = ds.subset(check_split(ds, train_split))
        val = ds.subset(check_split(ds, val_split))
        self.model_ = BiPedModel(config, seed=self.seed)
        self.log_ = fit(self.model_, train, val, self._schedule(), seed=self.seed,
                        weights=LossWeights(self.alpha, self.beta, self.gamma))
        self.n_parameters_ = self.model_.num_parameters()
        return self

    def _predict_all(self, X, split=None):
        check_is_fitted(self, "model_")
        ds = check_dataset(X)
        samples = check_split(ds, split)
        return samples, predict(self.model_, ds, samples)

    def predict(self, X, split=None):
        """Fused future boxes in pixels, N x tau x 4."""
        return self._predict_all(X, split)[1]["boxes"]

    def predict_proba(self, X, split=None):
        """Crossing probabilities as an N x 2 array (not crossing, crossing)."""
        p = self._predict_all(X, split)[1]["action"]
        return np.stack([1.0 - p, p], axis=1)

    def score(self, X, y=None, split=None):
        """Negative ADE in pixels, so that larger is better."""
        samples, pred = self._predict_all(X, split)
        truth = np.stack([s.future_boxes for s in samples])
        return -ade_fde(pred["boxes"], truth)[0]
