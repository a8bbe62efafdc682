"""Survival labels, longitudinal cohorts and their on-disk formats.

Times are in months throughout. A visit's label ``(T, E)`` follows the usual
right-censoring convention: with ``E = 1`` the eye converts ``T`` months after
the visit (``T <= 0`` means the visit is already converted); with ``E = 0``
the eye is last seen ``T`` months after the visit.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

LABEL_TOLERANCE_MONTHS = 1e-6


@dataclass(frozen=True)
class SurvivalLabel:
    time: float
    event: int

    def __post_init__(self):
        if self.event not in (0, 1):
            raise ValueError(f"event must be 0 or 1, got {self.event!r}")
        if not math.isfinite(self.time):
            raise ValueError(f"time must be finite, got {self.time!r}")
        if self.event == 0 and self.time < 0:
            raise ValueError("censored label needs time >= 0")
        object.__setattr__(self, "time", float(self.time))
        object.__setattr__(self, "event", int(self.event))

    @property
    def converted(self) -> bool:
        return derive_stage(self) == 1


def derive_stage(label: SurvivalLabel) -> int:
    """Stage indicator: 1 if the visit is already converted, else 0."""
    return int(label.event == 1 and label.time <= 0)


def forecast_mask(times, events):
    """Visits usable for forecasting: drops visits that are already converted."""
    t = np.asarray(times, dtype=float)
    e = np.asarray(events, dtype=int)
    return ~((e == 1) & (t <= 0))


@dataclass(frozen=True)
class TimeNormalizer:
    """Linear map from months to unit time; ``horizon_months`` maps to 1."""

    horizon_months: float = 36.0

    def __post_init__(self):
        if not self.horizon_months > 0:
            raise ValueError("horizon_months must be positive")

    def __call__(self, months):
        return normalize_time(months, self)


def normalize_time(months, norm: TimeNormalizer | None = None):
    """Map ``months`` to unit time without clamping at the horizon.

    Accepts scalars or arrays; negative input raises ``ValueError``.
    """
    norm = TimeNormalizer() if norm is None else norm
    arr = np.asarray(months, dtype=float)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise ValueError("months must be non-negative")
    out = arr / norm.horizon_months
    return float(out) if out.ndim == 0 else out


def _frozen_array(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Visit:
    eye_id: str
    visit_time: float
    features: np.ndarray
    label: SurvivalLabel | None = None
    views: tuple[np.ndarray, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "eye_id", str(self.eye_id))
        object.__setattr__(self, "visit_time", float(self.visit_time))
        object.__setattr__(self, "features", _frozen_array(self.features))
        if self.views is not None:
            object.__setattr__(
                self, "views", tuple(_frozen_array(v) for v in self.views)
            )

    def all_views(self) -> list[np.ndarray]:
        """Views used for inference; the features alone when no views exist."""
        if self.views is None:
            return [self.features]
        return list(self.views)

    @property
    def stage(self) -> int | None:
        return None if self.label is None else derive_stage(self.label)


@dataclass(frozen=True)
class Cohort:
    """Eyes mapped to their time-ordered visits.

    Construction does not enforce the cohort invariants; call
    :func:`validate_cohort` for a full report.
    """

    eyes: Mapping[str, tuple[Visit, ...]]
    feature_dim: int
    labeled: bool = True

    def __post_init__(self):
        eyes = {str(k): tuple(v) for k, v in self.eyes.items()}
        object.__setattr__(self, "eyes", eyes)

    @classmethod
    def from_visits(cls, visits: Iterable[Visit], feature_dim=None, labeled=None):
        eyes: dict[str, list[Visit]] = {}
        for v in visits:
            eyes.setdefault(v.eye_id, []).append(v)
        flat = [v for vs in eyes.values() for v in vs]
        if feature_dim is None:
            if not flat:
                raise ValueError("cannot infer feature_dim from an empty cohort")
            feature_dim = flat[0].features.shape[0]
        if labeled is None:
            labeled = bool(flat) and all(v.label is not None for v in flat)
        return cls(eyes, int(feature_dim), bool(labeled))

    def __len__(self):
        return len(self.eyes)

    def __iter__(self) -> Iterator[Visit]:
        for visits in self.eyes.values():
            yield from visits

    @property
    def eye_ids(self) -> list[str]:
        return list(self.eyes)

    @property
    def n_visits(self) -> int:
        return sum(len(v) for v in self.eyes.values())

    def visits(self) -> list[Visit]:
        return list(self)

    def features(self) -> np.ndarray:
        if self.n_visits == 0:
            return np.empty((0, self.feature_dim))
        return np.vstack([v.features for v in self])

    def label_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """``(T, E)`` arrays in visit order; raises if any label is missing."""
        visits = self.visits()
        if any(v.label is None for v in visits):
            raise ValueError("cohort has unlabeled visits")
        times = np.array([v.label.time for v in visits], dtype=float)
        events = np.array([v.label.event for v in visits], dtype=int)
        return times, events

    def eye_index(self) -> np.ndarray:
        """Integer eye index per visit, in visit order."""
        return np.concatenate(
            [np.full(len(vs), i) for i, vs in enumerate(self.eyes.values())]
        ).astype(int) if self.n_visits else np.empty(0, dtype=int)

    def subset(self, eye_ids: Iterable[str]) -> "Cohort":
        eye_ids = list(eye_ids)
        return Cohort({e: self.eyes[e] for e in eye_ids}, self.feature_dim, self.labeled)

    def without_labels(self) -> "Cohort":
        eyes = {
            e: tuple(
                Visit(v.eye_id, v.visit_time, v.features, None, v.views) for v in vs
            )
            for e, vs in self.eyes.items()
        }
        return Cohort(eyes, self.feature_dim, labeled=False)

    def map_features(self, fn) -> "Cohort":
        """Apply ``fn`` to every feature vector (and view) of the cohort."""
        eyes = {}
        for e, vs in self.eyes.items():
            eyes[e] = tuple(
                Visit(
                    v.eye_id,
                    v.visit_time,
                    fn(v.features),
                    v.label,
                    None if v.views is None else tuple(fn(x) for x in v.views),
                )
                for v in vs
            )
        return Cohort(eyes, self.feature_dim, self.labeled)


@dataclass(frozen=True)
class Violation:
    kind: str
    eye_id: str
    visit_index: int | None
    message: str

    def __str__(self):
        where = self.eye_id if self.visit_index is None else f"{self.eye_id}[{self.visit_index}]"
        return f"{self.kind}: {where}: {self.message}"


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def is_valid(self) -> bool:
        return not self.violations

    def __len__(self):
        return len(self.violations)

    def __iter__(self):
        return iter(self.violations)

    def by_kind(self, kind: str) -> list[Violation]:
        return [v for v in self.violations if v.kind == kind]


def validate_cohort(cohort: Cohort) -> ValidationReport:
    """Check every cohort invariant and report violations; never raises."""
    report = ValidationReport()
    add = report.violations.append
    d = cohort.feature_dim

    for eye_id, visits in cohort.eyes.items():
        for i, v in enumerate(visits):
            if v.eye_id != eye_id:
                add(Violation("eye_id", eye_id, i, f"visit carries eye_id {v.eye_id!r}"))
            if v.features.ndim != 1 or v.features.shape[0] != d:
                add(Violation("dimension", eye_id, i,
                              f"features shape {v.features.shape}, expected ({d},)"))
            elif not np.all(np.isfinite(v.features)):
                add(Violation("non_finite", eye_id, i, "features contain non-finite values"))
            if v.views is not None:
                if len(v.views) == 0:
                    add(Violation("dimension", eye_id, i, "empty view list"))
                for view in v.views:
                    if view.ndim != 1 or view.shape[0] != d:
                        add(Violation("dimension", eye_id, i,
                                      f"view shape {view.shape}, expected ({d},)"))
                        break
            if i > 0 and not v.visit_time > visits[i - 1].visit_time:
                add(Violation("ordering", eye_id, i,
                              f"visit_time {v.visit_time} does not exceed "
                              f"{visits[i - 1].visit_time}"))
            if cohort.labeled and v.label is None:
                add(Violation("missing_label", eye_id, i, "labeled cohort visit has no label"))
            if not cohort.labeled and v.label is not None:
                add(Violation("unexpected_label", eye_id, i, "unlabeled cohort visit has a label"))

        if not cohort.labeled:
            continue
        labels = [v.label for v in visits]
        if any(lab is None for lab in labels):
            continue
        if len({lab.event for lab in labels}) > 1:
            add(Violation("label_consistency", eye_id, None, "event indicator varies within eye"))
            continue
        if labels and labels[0].event == 1:
            for i in range(1, len(visits)):
                gap = visits[i].visit_time - visits[i - 1].visit_time
                drift = labels[i - 1].time - gap - labels[i].time
                if abs(drift) > LABEL_TOLERANCE_MONTHS:
                    add(Violation("label_consistency", eye_id, i,
                                  f"T drops by {labels[i - 1].time - labels[i].time} "
                                  f"over a {gap} month gap"))
    return report


def split_cohort(cohort: Cohort, sizes: Sequence[int], seed=0) -> list[Cohort]:
    """Split a cohort at eye level into consecutive random parts of ``sizes`` eyes."""
    if sum(sizes) > len(cohort):
        raise ValueError(f"requested {sum(sizes)} eyes from a cohort of {len(cohort)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(cohort))
    ids = cohort.eye_ids
    parts, start = [], 0
    for n in sizes:
        chosen = sorted(order[start:start + n])
        parts.append(cohort.subset(ids[i] for i in chosen))
        start += n
    return parts


# -- file formats ----------------------------------------------------------

def _visit_record(v: Visit) -> dict:
    rec = {"eye_id": v.eye_id, "visit_time": v.visit_time}
    if v.label is not None:
        rec["T"] = v.label.time
        rec["E"] = v.label.event
    rec["features"] = [float(x) for x in v.features]
    if v.views is not None:
        rec["views"] = [[float(x) for x in view] for view in v.views]
    return rec


def _label_from(rec: Mapping, where: str) -> SurvivalLabel | None:
    has_t = rec.get("T") not in (None, "")
    has_e = rec.get("E") not in (None, "")
    if has_t != has_e:
        raise ValueError(f"{where}: T and E must be given together")
    if not has_t:
        return None
    event = float(rec["E"])
    if event not in (0.0, 1.0):
        raise ValueError(f"{where}: E must be 0 or 1")
    return SurvivalLabel(float(rec["T"]), int(event))


def _cohort_from_visits(visits: list[Visit], where) -> Cohort:
    if not visits:
        raise ValueError(f"{where}: no visits")
    n_labeled = sum(v.label is not None for v in visits)
    if 0 < n_labeled < len(visits):
        raise ValueError(f"{where}: mixes labeled and unlabeled visits")
    return Cohort.from_visits(visits, labeled=n_labeled == len(visits))


def read_cohort(path) -> Cohort:
    """Read a cohort from ``.jsonl`` (one visit per line) or ``.csv``."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _read_csv(path)
    visits = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{where}: {exc}") from None
            for key in ("eye_id", "visit_time", "features"):
                if key not in rec:
                    raise ValueError(f"{where}: missing field {key!r}")
            views = rec.get("views")
            visits.append(Visit(rec["eye_id"], rec["visit_time"], rec["features"],
                                _label_from(rec, where), views))
    return _cohort_from_visits(visits, path)


def _read_csv(path: Path) -> Cohort:
    visits = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fcols = [c for c in reader.fieldnames or [] if c.startswith("f") and c[1:].isdigit()]
        fcols.sort(key=lambda c: int(c[1:]))
        if [int(c[1:]) for c in fcols] != list(range(len(fcols))) or not fcols:
            raise ValueError(f"{path}: feature columns must be f0..f(d-1)")
        for lineno, row in enumerate(reader, 2):
            where = f"{path}:{lineno}"
            feats = [float(row[c]) for c in fcols]
            visits.append(Visit(row["eye_id"], float(row["visit_time"]), feats,
                                _label_from(row, where)))
    return _cohort_from_visits(visits, path)


def write_cohort(cohort: Cohort, path) -> None:
    """Write ``cohort`` atomically; the format follows the file extension."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        if path.suffix.lower() == ".csv":
            header = ["eye_id", "visit_time"]
            if cohort.labeled:
                header += ["T", "E"]
            header += [f"f{i}" for i in range(cohort.feature_dim)]
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for v in cohort:
                row = [v.eye_id, repr(v.visit_time)]
                if cohort.labeled:
                    row += [repr(v.label.time), v.label.event]
                row += [repr(float(x)) for x in v.features]
                writer.writerow(row)
        else:
            for v in cohort:
                fh.write(json.dumps(_visit_record(v)) + "\n")
    os.replace(tmp, path)
