"""Censoring-aware evaluation of risk scores and horizon forecasts."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .domain import forecast_mask
from .exceptions import UndefinedMetricError

DEFAULT_HORIZONS = (6.0, 12.0, 24.0)


@dataclass(frozen=True)
class HorizonEval:
    """Scores and binary truth for "converts within ``horizon`` months".

    ``included`` drops already converted visits and visits censored at or
    before the horizon; ``truth`` is only meaningful where ``included``.
    """

    horizon: float
    scores: np.ndarray
    included: np.ndarray
    truth: np.ndarray

    @property
    def n_positive(self) -> int:
        return int(np.sum(self.included & self.truth))

    @property
    def n_negative(self) -> int:
        return int(np.sum(self.included & ~self.truth))

    def included_scores(self):
        return self.scores[self.included], self.truth[self.included]


def horizon_eval(scores, times, events, horizon, converters_after_horizon="negative"):
    """Build the inclusion mask and truth for one horizon (months).

    ``converters_after_horizon="exclude"`` drops converters with ``T > horizon``
    instead of counting them as negatives.
    """
    if converters_after_horizon not in ("negative", "exclude"):
        raise ValueError("converters_after_horizon must be 'negative' or 'exclude'")
    s = np.asarray(scores, dtype=float)
    t = np.asarray(times, dtype=float)
    e = np.asarray(events, dtype=int)
    positive = (e == 1) & (t > 0) & (t <= horizon)
    negative = t > horizon
    if converters_after_horizon == "exclude":
        negative &= e == 0
    return HorizonEval(float(horizon), s, positive | negative, positive)


def _require_both_classes(evals: HorizonEval):
    if evals.n_positive == 0 or evals.n_negative == 0:
        raise UndefinedMetricError(
            f"horizon {evals.horizon:g}: {evals.n_positive} positives and "
            f"{evals.n_negative} negatives after filtering"
        )


def horizon_auroc(evals: HorizonEval) -> float:
    """Mann-Whitney AUROC over included samples; score ties count one half."""
    _require_both_classes(evals)
    s, y = evals.included_scores()
    ranks = rankdata(s)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def balanced_accuracy(evals: HorizonEval, threshold: float) -> float:
    """Mean of sensitivity and specificity when ``score >= threshold`` is positive."""
    _require_both_classes(evals)
    s, y = evals.included_scores()
    pred = s >= threshold
    sens = np.sum(pred & y) / np.sum(y)
    specificity = np.sum(~pred & ~y) / np.sum(~y)
    return float((sens + specificity) / 2.0)


def select_threshold(val_evals: HorizonEval) -> float:
    """Midpoint threshold maximizing balanced accuracy; ties go to the smallest."""
    _require_both_classes(val_evals)
    s, y = val_evals.included_scores()
    distinct = np.unique(s)
    if distinct.size == 1:
        return float(distinct[0])
    candidates = 0.5 * (distinct[:-1] + distinct[1:])
    # sort once, then count positives/negatives at or above every candidate
    order = np.argsort(s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    first_above = np.searchsorted(s_sorted, candidates, side="left")
    pos_above = np.cumsum(y_sorted[::-1])[::-1]
    neg_above = np.cumsum((~y_sorted)[::-1])[::-1]
    n_pos, n_neg = y.sum(), (~y).sum()
    tp = pos_above[first_above]
    tn = n_neg - neg_above[first_above]
    bacc = (tp / n_pos + tn / n_neg) / 2.0
    return float(candidates[int(np.argmax(bacc))])


def concordance(risks, times, events, chunk=2048) -> float:
    """Harrell's C: pairs with ``T_i < T_j`` and ``E_i = 1``; higher risk should go first."""
    r = np.asarray(risks, dtype=float)
    t = np.asarray(times, dtype=float)
    e = np.asarray(events, dtype=int)
    if not (r.shape == t.shape == e.shape):
        raise ValueError("risks, times and events must have the same length")
    concordant = tied = comparable = 0
    for start in range(0, r.size, chunk):
        sl = slice(start, start + chunk)
        comp = (t[sl, None] < t[None, :]) & (e[sl, None] == 1)
        diff = r[sl, None] - r[None, :]
        comparable += int(comp.sum())
        concordant += int((comp & (diff > 0)).sum())
        tied += int((comp & (diff == 0)).sum())
    if comparable == 0:
        raise UndefinedMetricError("no comparable pairs")
    return (concordant + 0.5 * tied) / comparable


# -- Kaplan-Meier --------------------------------------------------------------

@dataclass(frozen=True)
class KMCurve:
    """Product-limit survival at each distinct observed time (events or censoring)."""

    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def survival_at(self, t):
        """Right-continuous step evaluation; 1 before the first observed time."""
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right") - 1
        out = np.where(idx >= 0, self.survival[np.maximum(idx, 0)], 1.0)
        return float(out) if out.ndim == 0 else out

    @property
    def event_times(self) -> np.ndarray:
        return self.times[self.events > 0]

    def median_time(self):
        """First time the survival drops to 0.5 or below; ``None`` if it never does."""
        hit = np.nonzero(self.survival <= 0.5)[0]
        return float(self.times[hit[0]]) if hit.size else None


def kaplan_meier(times, events) -> KMCurve:
    t = np.asarray(times, dtype=float)
    e = np.asarray(events, dtype=int)
    if t.size == 0:
        raise ValueError("kaplan_meier needs at least one sample")
    if np.any(t < 0):
        raise ValueError("times must be non-negative")
    grid, inverse = np.unique(t, return_inverse=True)
    d = np.bincount(inverse, weights=e, minlength=grid.size).astype(int)
    exits = np.bincount(inverse, minlength=grid.size)
    n = t.size - np.concatenate([[0], np.cumsum(exits)[:-1]])
    surv = np.cumprod(1.0 - d / n)
    return KMCurve(grid, surv, n.astype(int), d)


RISK_GROUP_NAMES = ("low", "medium", "high")


def stratify_and_km(calibrated_risks, times, events, cut_points=(1 / 3, 2 / 3)):
    """Kaplan-Meier curve per risk group; groups are half-open risk intervals.

    Returns an ordered ``{group_name: KMCurve}`` for non-empty groups, from
    lowest to highest risk.
    """
    r = np.asarray(calibrated_risks, dtype=float)
    if r.size == 0:
        raise ValueError("stratify_and_km needs at least one sample")
    cuts = np.asarray(cut_points, dtype=float)
    if np.any(np.diff(cuts) <= 0) or np.any((cuts <= 0) | (cuts >= 1)):
        raise ValueError("cut points must be increasing and inside (0, 1)")
    t = np.asarray(times, dtype=float)
    e = np.asarray(events, dtype=int)
    group = np.searchsorted(cuts, r, side="right")
    names = RISK_GROUP_NAMES if cuts.size == 2 else tuple(f"group{i}" for i in range(cuts.size + 1))
    return {names[g]: kaplan_meier(t[group == g], e[group == g])
            for g in range(cuts.size + 1) if np.any(group == g)}


def write_km_csv(curves: dict, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["time", "survival", "at_risk", "events", "group"])
        for name, curve in curves.items():
            for row in zip(curve.times, curve.survival, curve.at_risk, curve.events):
                writer.writerow([repr(float(row[0])), repr(float(row[1])),
                                 int(row[2]), int(row[3]), name])


# -- reports -------------------------------------------------------------------

def horizon_key(h) -> str:
    return f"{float(h):g}"


def point_metrics(risks, cdfs, times, events, thresholds=None):
    """Concordance plus per-horizon AUROC and balanced accuracy.

    ``cdfs`` maps horizon (months) to forecast scores. Undefined metrics are
    reported as ``None`` with the reason under ``"errors"``.
    """
    out = {"concordance": None, "horizons": {}, "errors": {}}
    try:
        out["concordance"] = concordance(risks, times, events)
    except UndefinedMetricError as exc:
        out["errors"]["concordance"] = str(exc)
    for h, scores in cdfs.items():
        key = horizon_key(h)
        ev = horizon_eval(scores, times, events, h)
        entry = {"auroc": None, "balanced_accuracy": None, "threshold": None,
                 "n_positive": ev.n_positive, "n_negative": ev.n_negative}
        try:
            entry["auroc"] = horizon_auroc(ev)
            if thresholds is not None and key in thresholds:
                entry["threshold"] = thresholds[key]
                entry["balanced_accuracy"] = balanced_accuracy(ev, thresholds[key])
        except UndefinedMetricError as exc:
            out["errors"][f"horizon_{key}"] = str(exc)
        out["horizons"][key] = entry
    return out


@dataclass
class BootstrapSummary:
    mean: dict
    std: dict
    n_valid: dict
    n_skipped: dict

    def as_dict(self):
        return {"mean": self.mean, "std": self.std,
                "n_valid": self.n_valid, "n_skipped": self.n_skipped}


def bootstrap_eye_level(cohort, model, horizons=DEFAULT_HORIZONS, n_resamples=1000,
                        seed=0, thresholds=None) -> BootstrapSummary:
    """Eye-level bootstrap: each resample keeps one random forecastable visit per eye.

    ``model`` needs ``predict_risk(cohort)`` and ``predict_cdf(cohort, months)``.
    Resample ``i`` draws from ``default_rng([seed, i])``; metrics undefined in
    a resample are skipped and counted.
    """
    times, events = cohort.label_arrays()
    risks = np.asarray(model.predict_risk(cohort), dtype=float)
    cdfs = {float(h): np.asarray(model.predict_cdf(cohort, h), dtype=float) for h in horizons}
    eligible = forecast_mask(times, events)
    eye_idx = cohort.eye_index()
    groups = [np.nonzero(eligible & (eye_idx == i))[0] for i in range(len(cohort))]
    groups = [g for g in groups if g.size]

    names = ["concordance"] + [f"auroc_{horizon_key(h)}" for h in horizons]
    if thresholds is not None:
        names += [f"balanced_accuracy_{horizon_key(h)}" for h in horizons]
    values = {n: [] for n in names}
    skipped = {n: 0 for n in names}
    for i in range(n_resamples):
        rng = np.random.default_rng([seed, i])
        pick = np.array([g[rng.integers(g.size)] for g in groups], dtype=int)
        res = point_metrics(risks[pick], {h: c[pick] for h, c in cdfs.items()},
                            times[pick], events[pick], thresholds)
        flat = {"concordance": res["concordance"]}
        for key, entry in res["horizons"].items():
            flat[f"auroc_{key}"] = entry["auroc"]
            flat[f"balanced_accuracy_{key}"] = entry["balanced_accuracy"]
        for n in names:
            if flat.get(n) is None:
                skipped[n] += 1
            else:
                values[n].append(flat[n])
    mean = {n: (float(np.mean(v)) if v else None) for n, v in values.items()}
    std = {n: (float(np.std(v)) if v else None) for n, v in values.items()}
    return BootstrapSummary(mean, std, {n: len(v) for n, v in values.items()}, skipped)

