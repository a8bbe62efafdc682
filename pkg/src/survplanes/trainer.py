"""Pair sampling, AdamW with a triangular cyclic learning rate, and training loops."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .domain import Cohort, TimeNormalizer, forecast_mask
from .encoder import DEFAULT_HIDDEN, EncoderParams
from .exceptions import SamplingError, TrainingDivergedError, UndefinedMetricError
from .head import Calibrator, HyperplaneHead, fit_calibrator
from .losses import MODES, SUPERVISED, UNSUPERVISED, PairBatch, evaluate
from .metrics import concordance, horizon_auroc, horizon_eval

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    updates_per_epoch: int = 300
    batch_pairs: int = 16
    lr_min: float = 1e-6
    lr_max: float = 1e-4
    half_period: int | None = None
    weight_decay: float = 1e-4
    seed: int = 0
    mode: str = SUPERVISED
    max_gap_months: float = 36.0
    damd_fraction: float = 0.5
    selection_metric: str = "concordance"
    hidden: tuple = DEFAULT_HIDDEN
    horizon_months: float = 36.0
    stop_target_gradient: bool = False
    freeze: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "freeze", tuple(str(f) for f in self.freeze))
        if self.epochs < 0 or self.updates_per_epoch < 1:
            raise ValueError("need epochs >= 0 and updates_per_epoch >= 1")
        if self.batch_pairs < 2:
            raise ValueError("batch_pairs must be at least 2")
        if not 0 < self.lr_min <= self.lr_max:
            raise ValueError("need 0 < lr_min <= lr_max")
        if self.half_period is not None and self.half_period < 1:
            raise ValueError("half_period must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not self.max_gap_months > 0:
            raise ValueError("max_gap_months must be positive")
        if not 0 <= self.damd_fraction <= 1:
            raise ValueError("damd_fraction must be in [0, 1]")
        parse_selection_metric(self.selection_metric)
        if not self.hidden:
            raise ValueError("hidden must list at least one layer size")
        TimeNormalizer(self.horizon_months)

    @property
    def cycle_half_period(self) -> int:
        """Updates per ramp; defaults to five epochs."""
        return self.half_period if self.half_period is not None else 5 * self.updates_per_epoch

    @property
    def normalizer(self) -> TimeNormalizer:
        return TimeNormalizer(self.horizon_months)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        out["freeze"] = list(self.freeze)
        return out


def parse_selection_metric(name: str):
    """``"concordance"`` or ``"auroc@<months>"`` -> ``(kind, horizon)``."""
    if name == "concordance":
        return "concordance", None
    if name.startswith("auroc@"):
        try:
            horizon = float(name.split("@", 1)[1])
        except ValueError:
            pass
        else:
            if horizon > 0:
                return "auroc", horizon
    raise ValueError(f"unknown selection metric {name!r}")


# -- pair sampling ---------------------------------------------------------------

@dataclass
class PairIndex:
    """Eligible ordered intra-subject pairs grouped by eye.

    ``positive`` / ``negative`` hold pairs whose later visit is / is not
    converted (supervised mode); ``any`` holds every pair.
    """

    visits: list
    positive: list = field(default_factory=list)
    negative: list = field(default_factory=list)
    any: list = field(default_factory=list)


def build_pair_index(cohort: Cohort, config: TrainConfig) -> PairIndex:
    supervised = config.mode == SUPERVISED
    if supervised and not cohort.labeled:
        raise ValueError("supervised mode needs a labeled training cohort, "
                         "got an unlabeled one")
    index = PairIndex(visits=[])
    for visits in cohort.eyes.values():
        base = len(index.visits)
        index.visits.extend(visits)
        pos, neg, anyp = [], [], []
        for j in range(len(visits)):
            if supervised and visits[j].stage == 1:
                continue
            for k in range(j + 1, len(visits)):
                gap = visits[k].visit_time - visits[j].visit_time
                if not 0 < gap <= config.max_gap_months:
                    continue
                pair = (base + j, base + k)
                anyp.append(pair)
                if supervised:
                    (pos if visits[k].stage == 1 else neg).append(pair)
        for bucket, pairs in ((index.positive, pos), (index.negative, neg), (index.any, anyp)):
            if pairs:
                bucket.append(pairs)
    return index


def _draw(groups, n, rng):
    out = []
    for _ in range(n):
        eye = groups[rng.integers(len(groups))]
        out.append(eye[rng.integers(len(eye))])
    return out


def sample_batch(cohort: Cohort, config: TrainConfig, rng, index: PairIndex | None = None):
    """Draw ``batch_pairs`` pairs: a random eye first, then one of its pairs.

    Supervised batches contain exactly ``floor(B * damd_fraction)`` pairs whose
    later visit is converted, drawn with replacement, and only unconverted
    earlier visits. Unsupervised batches carry no labels.
    """
    index = build_pair_index(cohort, config) if index is None else index
    b = config.batch_pairs
    if config.mode == SUPERVISED:
        n_pos = int(math.floor(b * config.damd_fraction))
        if n_pos and not index.positive:
            raise SamplingError("no converter pairs available to reach the dAMD fraction")
        if b - n_pos and not index.negative:
            raise SamplingError("no eligible pairs with an unconverted later visit")
        pairs = _draw(index.positive, n_pos, rng) + _draw(index.negative, b - n_pos, rng)
        pairs = [pairs[i] for i in rng.permutation(b)]
    else:
        if not index.any:
            raise SamplingError("no eligible intra-subject pairs")
        pairs = _draw(index.any, b, rng)

    vj = [index.visits[j] for j, _ in pairs]
    vk = [index.visits[k] for _, k in pairs]
    gap = config.normalizer(np.array([k.visit_time - j.visit_time for j, k in zip(vj, vk)]))
    kwargs = {}
    if config.mode == SUPERVISED:
        kwargs = dict(
            times_j=[v.label.time for v in vj], events_j=[v.label.event for v in vj],
            times_k=[v.label.time for v in vk], events_k=[v.label.event for v in vk],
        )
    return PairBatch(np.vstack([v.features for v in vj]), np.vstack([v.features for v in vk]),
                     gap, tuple(v.eye_id for v in vj), **kwargs)


# -- optimizer ---------------------------------------------------------------------

def lr_at(config: TrainConfig, step: int) -> float:
    """Triangular cyclic learning rate, starting at ``lr_min``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    half = config.cycle_half_period
    phase = step % (2 * half)
    frac = phase / half if phase <= half else (2 * half - phase) / half
    return config.lr_min + (config.lr_max - config.lr_min) * frac


@dataclass
class OptimizerState:
    first: dict
    second: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "OptimizerState":
        return cls({k: np.zeros_like(np.asarray(v, dtype=float)) for k, v in params.items()},
                   {k: np.zeros_like(np.asarray(v, dtype=float)) for k, v in params.items()})


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float,
               weight_decay: float, frozen=()):
    """One AdamW update; returns ``(new_params, new_state)`` without mutating inputs.

    Decay ``-lr * weight_decay * p`` is applied to the parameter separately
    from the bias-corrected adaptive step. Names starting with any prefix in
    ``frozen`` are left untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(state.step, f"non-finite gradient for {name}")
    step = state.step + 1
    new_params, first, second = {}, {}, {}
    for name, p in params.items():
        p = np.asarray(p, dtype=float)
        if any(name.startswith(f) for f in frozen):
            new_params[name], first[name], second[name] = p, state.first[name], state.second[name]
            continue
        g = np.asarray(grads[name], dtype=float)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = ADAM_BETA1 * state.first[name] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.second[name] + (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1 ** step)
        v_hat = v / (1.0 - ADAM_BETA2 ** step)
        decayed = p - lr * weight_decay * p
        new_params[name] = decayed - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        first[name], second[name] = m, v
    return new_params, OptimizerState(first, second, step)


# -- model state -------------------------------------------------------------------

@dataclass(frozen=True)
class Model:
    """Everything a checkpoint stores."""

    config: TrainConfig
    encoder: EncoderParams
    head: HyperplaneHead
    calibrator: Calibrator | None = None
    history_digest: str = ""
    seed_lineage: tuple = ()

    def named_arrays(self) -> dict:
        return {**self.encoder.named_arrays(), **self.head.named_arrays()}

    def with_arrays(self, arrays: dict) -> "Model":
        return replace(self, encoder=EncoderParams.from_named(arrays),
                       head=HyperplaneHead.from_named(arrays))

    def embed(self, x):
        return self.encoder.embed(_as_matrix(x))

    def predict_risk(self, x) -> np.ndarray:
        """Risk per visit (views averaged) for a cohort, or per row for an array."""
        return _per_visit(x, lambda rows: self.head.risk(self.encoder.embed(rows)))

    def predict_cdf(self, x, months) -> np.ndarray:
        """Probability of conversion within ``months`` of each visit or row."""
        t = self.config.normalizer(months)
        return _per_visit(x, lambda rows: self.head.cdf_at(self.encoder.embed(rows), t))


def _as_matrix(x):
    if isinstance(x, Cohort):
        return x.features()
    return np.asarray(x, dtype=float)


def _per_visit(cohort, fn):
    if not isinstance(cohort, Cohort):
        return fn(_as_matrix(cohort))
    visits = cohort.visits()
    if not visits:
        return np.empty(0)
    if all(v.views is None for v in visits):
        return fn(cohort.features())
    rows, owner = [], []
    for i, v in enumerate(visits):
        for view in v.all_views():
            rows.append(view)
            owner.append(i)
    values = fn(np.vstack(rows))
    owner = np.asarray(owner)
    return np.bincount(owner, weights=values) / np.bincount(owner)


def initialize_model(input_dim: int, config: TrainConfig, rng) -> Model:
    encoder = EncoderParams.initialize(input_dim, config.hidden, rng)
    head = HyperplaneHead.initialize(encoder.output_dim, rng)
    return Model(config, encoder, head, seed_lineage=(config.seed,))


def validation_score(model: Model, cohort: Cohort, metric: str):
    """Selection metric on the forecastable visits of a labeled cohort; ``None`` if undefined."""
    kind, horizon = parse_selection_metric(metric)
    times, events = cohort.label_arrays()
    keep = forecast_mask(times, events)
    risks = model.predict_risk(cohort)[keep]
    try:
        if kind == "concordance":
            return concordance(risks, times[keep], events[keep])
        return horizon_auroc(horizon_eval(risks, times[keep], events[keep], horizon))
    except UndefinedMetricError:
        return None


def history_digest(history) -> str:
    text = "\n".join(json.dumps(rec, sort_keys=True) for rec in history)
    return hashlib.sha256(text.encode()).hexdigest()


def fit_validation_calibrator(model: Model, cohort: Cohort | None):
    """Calibrator over all validation visits, or ``None`` when it cannot be fitted."""
    if cohort is None or cohort.n_visits < 11:
        return None
    risks = model.predict_risk(cohort)
    if np.all(risks == risks[0]):
        return None
    return fit_calibrator(risks)


def _run(model: Model, cohort_train: Cohort, cohort_val, config: TrainConfig, rng, on_epoch):
    index = build_pair_index(cohort_train, config)
    params = model.named_arrays()
    state = OptimizerState.zeros_like(params)
    best_params, best_score = params, None
    history = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        sums = np.zeros(3)
        for _ in range(config.updates_per_epoch):
            batch = sample_batch(cohort_train, config, rng, index)
            current = model.with_arrays(params)
            breakdown, grads = evaluate(batch, current.head, current.encoder, config.mode,
                                        config.stop_target_gradient)
            if not math.isfinite(breakdown.total):
                raise TrainingDivergedError(step, "non-finite loss")
            params, state = adamw_step(params, grads, state, lr_at(config, step),
                                       config.weight_decay, config.freeze)
            sums += (breakdown.classification, breakdown.consistency, breakdown.ranking)
            step += 1
        means = sums / config.updates_per_epoch
        record = {
            "epoch": epoch,
            "step": step,
            "loss_classification": float(means[0]),
            "loss_consistency": float(means[1]),
            "loss_ranking": float(means[2]),
            "loss_total": float(means.sum()),
            "lr": lr_at(config, step),
        }
        if cohort_val is not None:
            score = validation_score(model.with_arrays(params), cohort_val,
                                     config.selection_metric)
            record["val_" + config.selection_metric] = score
            if score is not None and (best_score is None or score > best_score):
                best_score, best_params = score, params
        else:
            best_params = params
        history.append(record)
        logger.info("epoch %d: %s", epoch, record)
        if on_epoch is not None:
            on_epoch(record)
    return model.with_arrays(best_params), history


def train(cohort_train: Cohort, cohort_val: Cohort | None, config: TrainConfig,
          on_epoch=None):
    """Train from a seeded initialization; returns ``(model, history)``.

    The returned parameters are those of the epoch with the best validation
    metric (the last epoch without a validation cohort). A calibrator is
    fitted on the validation risks of the selected model.
    """
    if config.mode == UNSUPERVISED:
        raise ValueError("train() runs supervised; use finetune_unsupervised for unlabeled data")
    if cohort_val is not None and not cohort_val.labeled:
        raise ValueError("validation cohort must be labeled")
    rng = np.random.default_rng(config.seed)
    model = initialize_model(cohort_train.feature_dim, config, rng)
    trained, history = _run(model, cohort_train, cohort_val, config, rng, on_epoch)
    trained = replace(trained, config=config,
                      calibrator=fit_validation_calibrator(trained, cohort_val),
                      history_digest=history_digest(history))
    return trained, history


def finetune_unsupervised(model: Model, unlabeled: Cohort, labeled_val: Cohort | None,
                          config: TrainConfig, on_epoch=None):
    """Adapt ``model`` with the label-free losses on intra-subject pairs of ``unlabeled``.

    With ``epochs=0`` the input model is returned unchanged.
    """
    if config.mode != UNSUPERVISED:
        raise ValueError("finetune_unsupervised needs config.mode='unsupervised'")
    if config.epochs == 0:
        return model, []
    if labeled_val is not None and not labeled_val.labeled:
        raise ValueError("validation cohort must be labeled")
    if unlabeled.labeled:
        unlabeled = unlabeled.without_labels()
    rng = np.random.default_rng(config.seed)
    tuned, history = _run(model, unlabeled, labeled_val, config, rng, on_epoch)
    calibrator = fit_validation_calibrator(tuned, labeled_val) or model.calibrator
    tuned = replace(tuned, config=config, calibrator=calibrator,
                    history_digest=history_digest(history),
                    seed_lineage=tuple(model.seed_lineage) + (config.seed,))
    return tuned, history
