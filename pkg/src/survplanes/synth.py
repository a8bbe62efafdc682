"""Synthetic longitudinal cohorts with a known conversion time per eye.

Latent severity grows linearly, ``s(t) = s0 + rate * t``, and an eye converts
when it crosses ``threshold``, so the true conversion time is closed form.
Observed features are noisy monotone links of severity plus a marker of the
eye's progression rate, padded with nuisance dimensions, and optionally
passed through an affine "scanner" shift.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .domain import Cohort, SurvivalLabel, Visit, forecast_mask
from .metrics import concordance


@dataclass
class SynthConfig:
    n_eyes: int = 300
    feature_dim: int = 8
    informative_dims: int = 2
    s0_low: float = 0.0
    s0_high: float = 0.6
    rate_log_mean: float = float(np.log(0.005))
    rate_log_sd: float = 0.8
    rate_marker_scale: float = 0.25
    threshold: float = 1.0
    noise_std: float = 0.03
    nuisance_std: float = 0.5
    visit_interval_low: float = 3.0
    visit_interval_high: float = 12.0
    study_months: float = 84.0
    min_follow_up_months: float = 24.0
    post_conversion_visits: int = 2
    converter_target_fraction: float | None = 0.2
    converter_tolerance: float = 0.05
    max_rate_rescale: float = 20.0
    n_views: int = 0
    view_noise_std: float = 0.01
    domain_shift_severity: float = 0.0
    shift_seed: int = 12345
    shift_eigen_low: float = 0.2
    shift_eigen_high: float = 3.0
    shift_matrix: list | None = None
    shift_offset: list | None = None
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.n_eyes < 1:
            raise ValueError("n_eyes must be positive")
        if not 1 <= self.informative_dims <= self.feature_dim:
            raise ValueError("need 1 <= informative_dims <= feature_dim")
        if not 0 <= self.s0_low <= self.s0_high < self.threshold:
            raise ValueError("need 0 <= s0_low <= s0_high < threshold")
        if self.rate_log_sd < 0 or self.noise_std < 0 or self.nuisance_std < 0:
            raise ValueError("standard deviations must be non-negative")
        if not 0 < self.visit_interval_low <= self.visit_interval_high:
            raise ValueError("need 0 < visit_interval_low <= visit_interval_high")
        if not 0 <= self.min_follow_up_months <= self.study_months:
            raise ValueError("need 0 <= min_follow_up_months <= study_months")
        if self.post_conversion_visits < 1:
            raise ValueError("post_conversion_visits must be at least 1")
        frac = self.converter_target_fraction
        if frac is not None and not 0 <= frac <= 1:
            raise ValueError("converter_target_fraction must be in [0, 1]")
        if not 0 <= self.domain_shift_severity <= 1:
            raise ValueError("domain_shift_severity must be in [0, 1]")
        if not 0 < self.shift_eigen_low <= self.shift_eigen_high:
            raise ValueError("need 0 < shift_eigen_low <= shift_eigen_high")
        if self.n_views < 0:
            raise ValueError("n_views must be non-negative")
        d = self.feature_dim
        if self.shift_matrix is not None and np.shape(self.shift_matrix) != (d, d):
            raise ValueError(f"shift_matrix must be {d}x{d}")
        if self.shift_offset is not None and np.shape(self.shift_offset) != (d,):
            raise ValueError(f"shift_offset must have length {d}")

    @classmethod
    def from_dict(cls, values: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GroundTruth:
    """True conversion time (months from baseline) and latent draws per eye."""

    conversion_time: dict
    baseline_severity: dict = field(default_factory=dict)
    rate: dict = field(default_factory=dict)

    def residual(self, cohort: Cohort) -> np.ndarray:
        """True months to conversion for every visit, in visit order."""
        return np.array([self.conversion_time[v.eye_id] - v.visit_time for v in cohort])

    def write(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            for eye, t in self.conversion_time.items():
                fh.write(json.dumps({"eye_id": eye, "t_star": t,
                                     "s0": self.baseline_severity.get(eye),
                                     "rate": self.rate.get(eye)}) + "\n")
        os.replace(tmp, path)

    @classmethod
    def read(cls, path) -> "GroundTruth":
        conv, s0, rate = {}, {}, {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    conv[rec["eye_id"]] = rec["t_star"]
                    s0[rec["eye_id"]] = rec.get("s0")
                    rate[rec["eye_id"]] = rec.get("rate")
        return cls(conv, s0, rate)


def shift_transform(config: SynthConfig):
    """``(B, c)`` of the affine feature shift ``x -> B x + c``.

    Unless given explicitly, ``B`` interpolates between the identity and a
    random symmetric positive definite matrix with eigenvalues drawn from
    ``[shift_eigen_low, shift_eigen_high]``, so it stays well conditioned at
    every severity.
    """
    d = config.feature_dim
    lam = config.domain_shift_severity
    rng = np.random.default_rng(config.shift_seed)
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    target = q @ np.diag(rng.uniform(config.shift_eigen_low, config.shift_eigen_high, size=d)) @ q.T
    offset = rng.normal(0.0, 0.5, size=d)
    if config.shift_matrix is not None:
        mat = np.asarray(config.shift_matrix, dtype=float)
    else:
        mat = (1.0 - lam) * np.eye(d) + lam * target
    if config.shift_offset is not None:
        off = np.asarray(config.shift_offset, dtype=float)
    else:
        off = lam * offset
    return mat, off


def _schedule(rng, config):
    follow_up = rng.uniform(config.min_follow_up_months, config.study_months)
    times = [0.0]
    while True:
        nxt = times[-1] + rng.uniform(config.visit_interval_low, config.visit_interval_high)
        if nxt > follow_up:
            return np.array(times)
        times.append(nxt)


def _rate_rescale(s0, rates, last_visit, config):
    """Common rate multiplier giving the target converter fraction."""
    frac = config.converter_target_fraction
    if frac is None:
        return 1.0
    n = s0.size
    with np.errstate(divide="ignore"):
        needed = np.where(last_visit > 0, (config.threshold - s0) / (rates * last_visit), np.inf)
    order = np.sort(needed)
    k = int(round(frac * n))
    if k == 0:
        scale = order[0] / 2.0
    elif k == n:
        scale = order[-1] * 1.01
    else:
        scale = np.sqrt(order[k - 1] * order[k]) if np.isfinite(order[k]) else order[k - 1] * 1.01
    lo, hi = 1.0 / config.max_rate_rescale, config.max_rate_rescale
    if not (np.isfinite(scale) and lo <= scale <= hi):
        raise ValueError(
            f"converter fraction {frac} unreachable with rate rescaling in [{lo:g}, {hi:g}]"
        )
    achieved = np.mean(needed <= scale)
    if abs(achieved - frac) > config.converter_tolerance:
        raise ValueError(f"converter fraction {achieved:.3f} misses target {frac}")
    return float(scale)


def _features(severity, marker, config, rng):
    d, k = config.feature_dim, config.informative_dims
    x = np.empty((severity.size, d))
    links = [severity, marker + severity]
    links += [severity ** (p + 1) for p in range(1, k - 1)]
    for i in range(k):
        x[:, i] = links[i] + rng.normal(0.0, config.noise_std, size=severity.size)
    x[:, k:] = rng.normal(0.0, config.nuisance_std, size=(severity.size, d - k))
    return x


def generate(config: SynthConfig | None = None):
    """Draw a labeled cohort and its ground truth from ``config``."""
    config = SynthConfig() if config is None else config
    config.validate()
    rng = np.random.default_rng(config.seed)
    n = config.n_eyes
    s0 = rng.uniform(config.s0_low, config.s0_high, size=n)
    z = rng.normal(size=n)
    raw_rates = np.exp(config.rate_log_mean + config.rate_log_sd * z)
    schedules = [_schedule(rng, config) for _ in range(n)]
    last = np.array([s[-1] for s in schedules])
    rates = raw_rates * _rate_rescale(s0, raw_rates, last, config)
    t_star = (config.threshold - s0) / rates
    shift_b, shift_c = shift_transform(config)
    identity_shift = config.domain_shift_severity == 0 and config.shift_matrix is None \
        and config.shift_offset is None

    eyes, conv, base, rate_map = {}, {}, {}, {}
    for i in range(n):
        eye_id = f"eye{i:04d}"
        times = schedules[i]
        converter = t_star[i] <= times[-1]
        if converter:
            after = np.nonzero(times >= t_star[i])[0]
            times = times[: after[0] + config.post_conversion_visits]
        severity = s0[i] + rates[i] * times
        feats = _features(severity, config.rate_marker_scale * z[i], config, rng)
        if not identity_shift:
            feats = feats @ shift_b.T + shift_c
        visits = []
        for v_idx, t in enumerate(times):
            if converter:
                label = SurvivalLabel(t_star[i] - t, 1)
            else:
                label = SurvivalLabel(times[-1] - t, 0)
            views = None
            if config.n_views:
                views = [feats[v_idx] + rng.normal(0.0, config.view_noise_std, size=feats.shape[1])
                         for _ in range(config.n_views)]
            visits.append(Visit(eye_id, t, feats[v_idx], label, views))
        eyes[eye_id] = tuple(visits)
        conv[eye_id] = float(t_star[i])
        base[eye_id] = float(s0[i])
        rate_map[eye_id] = float(rates[i])
    return Cohort(eyes, config.feature_dim, labeled=True), GroundTruth(conv, base, rate_map)


def oracle_concordance(cohort: Cohort, truth: GroundTruth) -> float:
    """Concordance of the ideal risk (minus true residual time) on forecastable visits."""
    times, events = cohort.label_arrays()
    keep = forecast_mask(times, events)
    ideal = -truth.residual(cohort)
    return concordance(ideal[keep], times[keep], events[keep])
