"""scikit-learn style wrappers.

``X`` is a sequence of :class:`~echoquant.records.StudyQuad` for fitting and
measuring, and a (N, H, W) uint8 image stack for per-image prediction.
"""
from __future__ import annotations

from typing import Dict, Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_n_disks, check_studies
from .quant import DEFAULT_N_DISKS, measure_study
from .records import LVIndicators
from .training import EvalReport, SampleSet, TrainConfig, evaluate_model, fit_model, predict_arrays


class BiplaneSimpsonMeasurer(TransformerMixin, BaseEstimator):
    """Annotated studies -> (n_studies, 5) array of EDL, ESL, EDV, ESV, EF.

    Stateless: ``fit`` only validates parameters.
    """

    def __init__(self, n_disks: int = DEFAULT_N_DISKS):
        self.n_disks = n_disks

    def fit(self, X=None, y=None):
        check_n_disks(self.n_disks)
        self.n_features_out_ = len(LVIndicators.FIELDS)
        return self

    def transform(self, X) -> np.ndarray:
        n = check_n_disks(self.n_disks)
        studies = check_studies(X)
        return np.array([measure_study(st, n).as_tuple() for st in studies], dtype=np.float64)

    def get_feature_names_out(self, input_features=None):
        return np.asarray(LVIndicators.FIELDS, dtype=object)

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.requires_fit = False
        return tags


class DualTaskSAMEstimator(BaseEstimator):
    """Joint LV segmentation and landmark model.

    ``fit`` trains on complete studies with images; ``predict`` returns binary
    masks, ``predict_landmarks`` (N, 3, 2) points in P_A, P_L, P_R order and
    ``measure`` the clinical indicators derived from both.
    """

    def __init__(self, epochs: int = 60, warmup_epochs: int = 10, batch_size: int = 4,
                 peak_lr: float = 2e-4, augment: bool = True, seed: int = 0, input_size: int = 256,
                 model: Optional[Dict] = None, n_disks: int = DEFAULT_N_DISKS, out_dir: Optional[str] = None):
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.batch_size = batch_size
        self.peak_lr = peak_lr
        self.augment = augment
        self.seed = seed
        self.input_size = input_size
        self.model = model
        self.n_disks = n_disks
        self.out_dir = out_dir

    def _train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, input_size=self.input_size, peak_lr=self.peak_lr,
                           epochs=self.epochs, warmup_epochs=self.warmup_epochs, augment=self.augment,
                           seed=self.seed, model=dict(self.model or {}))

    def fit(self, X, y=None):
        studies = check_studies(X, require_images=True)
        check_n_disks(self.n_disks)
        cfg = self._train_config()
        samples = SampleSet.from_studies(studies)
        check_images(samples.images, self.input_size)
        self.model_, self.history_ = fit_model(cfg, samples, out_dir=self.out_dir)
        return self

    def _predict_both(self, images):
        check_is_fitted(self, "model_")
        return predict_arrays(self.model_, check_images(images, self.input_size))

    def predict(self, X) -> np.ndarray:
        return self._predict_both(X)[0]

    def predict_landmarks(self, X) -> np.ndarray:
        return self._predict_both(X)[1]

    def evaluate(self, X) -> EvalReport:
        check_is_fitted(self, "model_")
        return evaluate_model(self.model_, check_studies(X, require_images=True), check_n_disks(self.n_disks))

    def measure(self, X) -> np.ndarray:
        """Predicted (n_studies, 5) indicators; NaN rows where measurement fails."""
        rows = self.evaluate(X).rows
        return np.array([[r[f"{k}_pred"] for k in LVIndicators.FIELDS] for r in rows], dtype=np.float64)

    def score(self, X, y=None) -> float:
        """Mean Dice coefficient over all images of ``X``."""
        return self.evaluate(X).DC
