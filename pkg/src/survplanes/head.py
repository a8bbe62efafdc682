"""Parallel-hyperplane survival head and post-hoc risk calibration.

A single normal vector ``w`` defines the risk score ``r = w . f``. The family
of hyperplanes sharing ``w`` with bias ``b(t) = alpha * t + beta`` turns the
same score into a conversion probability ``p_t = sigmoid(r + b(t))`` for any
normalized horizon ``t``; ``t = 0`` is the stage classifier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DegenerateDistributionError

N_KNOTS = 11
KNOT_VALUES = np.arange(N_KNOTS) / 10.0
GAMMA_RAW_UNIT = float(np.log(np.expm1(1.0)))


def sigmoid(x):
    return expit(x)


def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("softplus output must be positive")
    return np.log(np.expm1(y))


@dataclass(frozen=True)
class HyperplaneHead:
    """Shared normal ``w`` plus the scalar bias parameters.

    ``alpha_raw`` and ``gamma_raw`` are unconstrained; the effective slope and
    ranking scale are their softplus, so ``alpha >= 0`` and ``gamma > 0``.
    """

    w: np.ndarray
    beta: float = 0.0
    alpha_raw: float = 0.0
    gamma_raw: float = GAMMA_RAW_UNIT

    def __post_init__(self):
        w = np.array(self.w, dtype=float).reshape(-1)
        w.setflags(write=False)
        object.__setattr__(self, "w", w)
        for name in ("beta", "alpha_raw", "gamma_raw"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @classmethod
    def initialize(cls, embedding_dim, rng=None):
        """Glorot-uniform ``w``; ``alpha = ln 2``, ``beta = 0``, ``gamma = 1``."""
        rng = np.random.default_rng(rng)
        limit = np.sqrt(6.0 / (embedding_dim + 1))
        return cls(rng.uniform(-limit, limit, size=embedding_dim))

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {
            "head.w": self.w,
            "head.beta": np.array(self.beta),
            "head.alpha_raw": np.array(self.alpha_raw),
            "head.gamma_raw": np.array(self.gamma_raw),
        }

    @classmethod
    def from_named(cls, arrays):
        return cls(arrays["head.w"], float(arrays["head.beta"]),
                   float(arrays["head.alpha_raw"]), float(arrays["head.gamma_raw"]))

    @property
    def embedding_dim(self) -> int:
        return self.w.shape[0]

    @property
    def alpha(self) -> float:
        return float(softplus(self.alpha_raw))

    @property
    def gamma(self) -> float:
        return float(softplus(self.gamma_raw))

    def _check(self, f):
        f = np.asarray(f, dtype=float)
        if f.shape[-1:] != self.w.shape:
            raise ValueError(
                f"embedding has dimension {f.shape[-1:]}, head expects {self.w.shape[0]}"
            )
        return f

    def risk(self, f):
        """Risk score ``w . f`` (the bias is constant and left out)."""
        return self._check(f) @ self.w

    def bias_at(self, t):
        return self.alpha * np.asarray(t, dtype=float) + self.beta

    def cdf_at(self, f, t):
        """Probability of conversion within normalized time ``t``.

        Broadcasts over a batch of embeddings and/or an array of times.
        """
        return sigmoid(self.risk(f) + self.bias_at(t))

    def stage_proba(self, f):
        return self.cdf_at(f, 0.0)


def predict_multiview(head: HyperplaneHead, encoder, visit, t):
    """Mean of ``cdf_at`` over the visit's views (its features if none)."""
    views = visit.all_views()
    if not views:
        raise ValueError("visit has an empty view list")
    emb = encoder.embed(np.vstack(views))
    return float(np.mean(head.cdf_at(emb, t)))


# -- monotone cubic calibration ----------------------------------------------

def fritsch_carlson_slopes(x, y):
    """Knot derivatives of the Fritsch-Carlson monotone cubic interpolant.

    ``x`` strictly increasing, ``y`` monotone. Three-point initial slopes,
    zeroed at local extrema, then rescaled onto the circle of radius 3.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.size
    h = np.diff(x)
    delta = np.diff(y) / h
    m = np.empty(n)
    m[0] = delta[0]
    m[-1] = delta[-1]
    if n > 2:
        m[1:-1] = 0.5 * (delta[:-1] + delta[1:])
        m[1:-1][np.sign(delta[:-1]) * np.sign(delta[1:]) <= 0] = 0.0
    for k in range(n - 1):
        if delta[k] == 0.0:
            m[k] = m[k + 1] = 0.0
            continue
        a = m[k] / delta[k]
        b = m[k + 1] / delta[k]
        radius = a * a + b * b
        if radius > 9.0:
            tau = 3.0 / np.sqrt(radius)
            m[k] = tau * a * delta[k]
            m[k + 1] = tau * b * delta[k]
    return m


def hermite_coefficients(x, y, m):
    """Per-segment coefficients of ``c0 + c1 s + c2 s^2 + c3 s^3``.

    ``s = (r - x[i]) / (x[i+1] - x[i])`` is the position inside segment ``i``;
    working in ``s`` keeps the coefficients bounded for narrow segments.
    """
    h = np.diff(x)
    dy = np.diff(y)
    m0, m1 = h * m[:-1], h * m[1:]
    return np.column_stack([y[:-1], m0, 3.0 * dy - 2.0 * m0 - m1, m0 + m1 - 2.0 * dy])


@dataclass(frozen=True)
class Calibrator:
    """Monotone map from raw risk to [0, 1] through decile knots."""

    knot_risks: np.ndarray
    knot_values: np.ndarray
    coefficients: np.ndarray

    def __call__(self, r):
        return calibrate(self, r)


TIE_TOLERANCE = 1e-12


def _collapse_ties(knots, values):
    """Merge knots closer than ``TIE_TOLERANCE`` of the knot range; values are averaged."""
    span = knots[-1] - knots[0]
    group = np.concatenate([[0], np.cumsum(np.diff(knots) > TIE_TOLERANCE * span)])
    first = np.concatenate([[True], np.diff(group) > 0])
    sums = np.bincount(group, weights=values)
    return knots[first], sums / np.bincount(group)


def fit_calibrator(validation_risks) -> Calibrator:
    """Fit the decile-knot monotone cubic map on validation risk scores."""
    r = np.asarray(validation_risks, dtype=float).reshape(-1)
    if r.size < N_KNOTS:
        raise ValueError(f"need at least {N_KNOTS} risk values, got {r.size}")
    if not np.all(np.isfinite(r)):
        raise ValueError("risk values must be finite")
    if np.all(r == r[0]):
        raise DegenerateDistributionError("all validation risks are identical")
    knots = np.percentile(r, np.arange(N_KNOTS) * 10.0, method="linear")
    knots, values = _collapse_ties(knots, KNOT_VALUES)
    # segment coefficients are invariant to rescaling x, so fit on [0, 1]
    unit = (knots - knots[0]) / (knots[-1] - knots[0])
    slopes = fritsch_carlson_slopes(unit, values)
    return Calibrator(knots, values, hermite_coefficients(unit, values, slopes))


def calibrate(cal: Calibrator, r):
    """Evaluate the calibration map; clamps to 0 below and 1 above the knots."""
    r_arr = np.asarray(r, dtype=float)
    flat = r_arr.reshape(-1)
    x = cal.knot_risks
    seg = np.clip(np.searchsorted(x, flat, side="right") - 1, 0, x.size - 2)
    with np.errstate(over="ignore"):
        u = np.clip((flat - x[seg]) / (x[seg + 1] - x[seg]), 0.0, 1.0)
    c = cal.coefficients[seg]
    out = c[:, 0] + u * (c[:, 1] + u * (c[:, 2] + u * c[:, 3]))
    # a monotone segment stays between its end values; this only absorbs rounding
    out = np.clip(out, cal.knot_values[seg], cal.knot_values[seg + 1])
    out[flat < x[0]] = 0.0
    out[flat > x[-1]] = 1.0
    out[flat == x[-1]] = cal.knot_values[-1]
    out = out.reshape(r_arr.shape)
    return float(out) if out.ndim == 0 else out


class RiskCalibrator(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`fit_calibrator` for use in pipelines.

    Attributes
    ----------
    calibrator_ : Calibrator
        The fitted map.
    """

    def fit(self, X, y=None):
        self.calibrator_ = fit_calibrator(np.ravel(X))
        return self

    def transform(self, X):
        check_is_fitted(self, "calibrator_")
        return calibrate(self.calibrator_, np.asarray(X, dtype=float))
