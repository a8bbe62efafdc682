"""scikit-learn style wrapper around training and inference."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .domain import Cohort, forecast_mask
from .encoder import DEFAULT_HIDDEN
from .head import calibrate
from .metrics import concordance
from .trainer import Model, TrainConfig, finetune_unsupervised, train

_CONFIG_PARAMS = ("epochs", "updates_per_epoch", "batch_pairs", "lr_min", "lr_max",
                  "half_period", "weight_decay", "max_gap_months", "damd_fraction",
                  "selection_metric", "hidden", "horizon_months", "stop_target_gradient",
                  "freeze")


class ParallelHyperplaneForecaster(BaseEstimator):
    """Conversion-time forecaster with a shared risk direction and a time-shifted bias.

    ``fit`` takes a labeled :class:`~survplanes.domain.Cohort` because the
    training pairs come from visits of the same eye; prediction methods also
    accept plain feature matrices of shape ``(n_samples, n_features)``.

    Parameters
    ----------
    epochs, updates_per_epoch, batch_pairs : int
        Training length and pairs per update.
    lr_min, lr_max : float
        Bounds of the triangular cyclic learning rate.
    half_period : int or None
        Updates per learning-rate ramp; ``None`` means five epochs.
    weight_decay : float
        Decoupled AdamW weight decay.
    max_gap_months : float
        Largest visit gap used to form training pairs.
    damd_fraction : float
        Share of each supervised batch whose later visit has converted.
    selection_metric : str
        ``"concordance"`` or ``"auroc@<months>"`` on the validation cohort.
    hidden : tuple of int
        Encoder layer widths; the last one is the embedding size.
    horizon_months : float
        Time normalizer; ``t = months / horizon_months``.
    stop_target_gradient : bool
        Detach the later visit's stage probability in the consistency term.
    freeze : tuple of str
        Parameter name prefixes kept fixed during fine-tuning and training.
    random_state : int
        Seed for initialization and pair sampling.

    Attributes
    ----------
    model_ : Model
        Trained parameters, configuration and calibrator.
    history_ : list of dict
        Per-epoch losses and validation metric.
    n_features_in_ : int
        Feature dimension seen during ``fit``.
    """

    def __init__(self, epochs=200, updates_per_epoch=300, batch_pairs=16, lr_min=1e-6,
                 lr_max=1e-4, half_period=None, weight_decay=1e-4, max_gap_months=36.0,
                 damd_fraction=0.5, selection_metric="concordance", hidden=DEFAULT_HIDDEN,
                 horizon_months=36.0, stop_target_gradient=False, freeze=(), random_state=0):
        self.epochs = epochs
        self.updates_per_epoch = updates_per_epoch
        self.batch_pairs = batch_pairs
        self.lr_min = lr_min
        self.lr_max = lr_max
        self.half_period = half_period
        self.weight_decay = weight_decay
        self.max_gap_months = max_gap_months
        self.damd_fraction = damd_fraction
        self.selection_metric = selection_metric
        self.hidden = hidden
        self.horizon_months = horizon_months
        self.stop_target_gradient = stop_target_gradient
        self.freeze = freeze
        self.random_state = random_state

    def _config(self, **overrides) -> TrainConfig:
        values = {name: getattr(self, name) for name in _CONFIG_PARAMS}
        values["seed"] = int(self.random_state)
        values.update(overrides)
        return TrainConfig(**values)

    @classmethod
    def from_model(cls, model: Model) -> "ParallelHyperplaneForecaster":
        """Wrap an already trained model, e.g. one loaded from a checkpoint."""
        cfg = model.config
        est = cls(**{name: getattr(cfg, name) for name in _CONFIG_PARAMS},
                  random_state=cfg.seed)
        est.model_ = model
        est.history_ = []
        est.n_features_in_ = model.encoder.input_dim
        return est

    def fit(self, X, y=None, eval_set=None):
        """Train on a labeled cohort.

        Parameters
        ----------
        X : Cohort
            Labeled training cohort.
        y : None
            Ignored; labels live on the visits.
        eval_set : Cohort, optional
            Labeled validation cohort for model selection and calibration.

        Returns
        -------
        self
        """
        if not isinstance(X, Cohort):
            raise TypeError("fit needs a Cohort; pairs are formed within eyes")
        self.model_, self.history_ = train(X, eval_set, self._config())
        self.n_features_in_ = X.feature_dim
        return self

    def finetune(self, X, eval_set=None, epochs=None, random_state=None):
        """Adapt the fitted model on an unlabeled cohort with the label-free losses."""
        check_is_fitted(self, "model_")
        if not isinstance(X, Cohort):
            raise TypeError("finetune needs a Cohort; pairs are formed within eyes")
        overrides = {"mode": "unsupervised"}
        if epochs is not None:
            overrides["epochs"] = int(epochs)
        if random_state is not None:
            overrides["seed"] = int(random_state)
        self.model_, history = finetune_unsupervised(self.model_, X, eval_set,
                                                     self._config(**overrides))
        self.history_ = list(self.history_) + history
        return self

    def _rows(self, X):
        check_is_fitted(self, "model_")
        if isinstance(X, Cohort):
            if X.feature_dim != self.n_features_in_:
                raise ValueError(f"X has {X.feature_dim} features, expected {self.n_features_in_}")
            return X
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def transform(self, X):
        """Embeddings of every row (or every visit's primary features)."""
        rows = self._rows(X)
        return self.model_.embed(rows)

    def predict_risk(self, X):
        """Risk score per visit; views are averaged for cohorts."""
        rows = self._rows(X)
        return self.model_.predict_risk(rows)

    predict = predict_risk

    def predict_cdf(self, X, months):
        """Probability of conversion within ``months`` of each visit."""
        rows = self._rows(X)
        return self.model_.predict_cdf(rows, months)

    def predict_stage_proba(self, X):
        """Probability that each visit has already converted."""
        return self.predict_cdf(X, 0.0)

    def predict_calibrated(self, X):
        """Risk mapped to ``[0, 1]`` by the validation calibrator."""
        risks = self.predict_risk(X)
        if self.model_.calibrator is None:
            raise ValueError("model has no calibrator; fit with an eval_set")
        return calibrate(self.model_.calibrator, risks)

    def score(self, X, y=None):
        """Concordance on the forecastable visits of a labeled cohort."""
        if not isinstance(X, Cohort) or not X.labeled:
            raise TypeError("score needs a labeled Cohort")
        times, events = X.label_arrays()
        keep = forecast_mask(times, events)
        return concordance(self.predict_risk(X)[keep], times[keep], events[keep])
