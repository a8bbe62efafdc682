"""Siamese training losses and their gradients.

Each batch holds ``B`` intra-subject pairs ``(j, k)`` with ``j`` the earlier
visit. Three terms are combined with equal weight:

* classification: stage BCE for both visits plus the forecast from ``j``
  over the gap, scored against the stage of ``k``;
* consistency: soft-target BCE between the stage probability of ``k`` and
  the forecast from ``j`` (label free);
* ranking: logistic loss on scaled risk differences over censoring-aware
  comparable pairs.

Unsupervised mode drops the classification term and restricts ranking to the
batch's own intra-subject pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .head import HyperplaneHead, sigmoid

EPS = 1e-7
SUPERVISED = "supervised"
UNSUPERVISED = "unsupervised"
MODES = (SUPERVISED, UNSUPERVISED)


@dataclass(frozen=True)
class PairBatch:
    """``B`` ordered intra-subject pairs; labels are ``None`` when unlabeled.

    ``gap`` is the normalized time from visit ``j`` to visit ``k``.
    """

    features_j: np.ndarray
    features_k: np.ndarray
    gap: np.ndarray
    eye_ids: tuple
    times_j: np.ndarray | None = None
    events_j: np.ndarray | None = None
    times_k: np.ndarray | None = None
    events_k: np.ndarray | None = None

    def __post_init__(self):
        fj = np.atleast_2d(np.asarray(self.features_j, dtype=float))
        fk = np.atleast_2d(np.asarray(self.features_k, dtype=float))
        gap = np.asarray(self.gap, dtype=float).reshape(-1)
        if fj.shape != fk.shape or gap.shape[0] != fj.shape[0]:
            raise ValueError("pair arrays disagree in length or dimension")
        if len(self.eye_ids) != gap.shape[0]:
            raise ValueError("need one eye id per pair")
        if np.any(gap <= 0):
            raise ValueError("every pair needs a positive time gap")
        object.__setattr__(self, "features_j", fj)
        object.__setattr__(self, "features_k", fk)
        object.__setattr__(self, "gap", gap)
        object.__setattr__(self, "eye_ids", tuple(self.eye_ids))
        label_fields = ("times_j", "events_j", "times_k", "events_k")
        present = [getattr(self, n) is not None for n in label_fields]
        if any(present) and not all(present):
            raise ValueError("labels must be given for both visits of every pair")
        if all(present):
            for n in label_fields:
                dtype = int if n.startswith("events") else float
                object.__setattr__(self, n, np.asarray(getattr(self, n), dtype=dtype).reshape(-1))

    def __len__(self):
        return self.gap.shape[0]

    @property
    def labeled(self) -> bool:
        return self.times_j is not None

    @property
    def stages_j(self) -> np.ndarray:
        return ((self.events_j == 1) & (self.times_j <= 0)).astype(float)

    @property
    def stages_k(self) -> np.ndarray:
        return ((self.events_k == 1) & (self.times_k <= 0)).astype(float)

    def stacked_features(self) -> np.ndarray:
        """Both branches stacked: rows ``0..B-1`` are ``j``, ``B..2B-1`` are ``k``."""
        return np.vstack([self.features_j, self.features_k])

    def stacked_labels(self):
        if not self.labeled:
            raise ValueError("batch has no labels")
        times = np.concatenate([self.times_j, self.times_k])
        events = np.concatenate([self.events_j, self.events_k])
        return times, events, self.eye_ids + self.eye_ids

    def repeat(self, n: int) -> "PairBatch":
        """The batch with every pair repeated ``n`` times."""
        rep = lambda a: None if a is None else np.concatenate([a] * n)  # noqa: E731
        return PairBatch(rep(self.features_j), rep(self.features_k), rep(self.gap),
                         self.eye_ids * n, rep(self.times_j), rep(self.events_j),
                         rep(self.times_k), rep(self.events_k))


@dataclass(frozen=True)
class ComparablePairSets:
    """Index pairs ``(m, n)``: ``lt`` where m converts first, ``gt`` where n does."""

    lt: np.ndarray
    gt: np.ndarray

    def __post_init__(self):
        for name in ("lt", "gt"):
            arr = np.asarray(getattr(self, name), dtype=int).reshape(-1, 2)
            object.__setattr__(self, name, arr)

    @property
    def size(self) -> int:
        return self.lt.shape[0] + self.gt.shape[0]


@dataclass(frozen=True)
class LossBreakdown:
    classification: float
    consistency: float
    ranking: float

    @property
    def total(self) -> float:
        return self.classification + self.consistency + self.ranking


def bce(target, pred):
    """Binary cross entropy with soft targets; ``pred`` is clamped to [eps, 1-eps]."""
    t = np.asarray(target, dtype=float)
    if np.any((t < 0) | (t > 1)) or np.any(np.isnan(t)):
        raise ValueError("bce target must lie in [0, 1]")
    loss = _bce(t, np.asarray(pred, dtype=float))[0]
    return float(loss) if loss.ndim == 0 else loss


def _bce(t, p):
    """Loss, d/dpred (zero where clamped) and d/dtarget."""
    pc = np.clip(p, EPS, 1.0 - EPS)
    log_p, log_q = np.log(pc), np.log1p(-pc)
    loss = -(t * log_p + (1.0 - t) * log_q)
    live = (p > EPS) & (p < 1.0 - EPS)
    d_pred = np.where(live, -t / pc + (1.0 - t) / (1.0 - pc), 0.0)
    d_target = log_q - log_p
    return loss, d_pred, d_target


def ranking_sets(times, events, eye_ids) -> ComparablePairSets:
    """Comparable ordered pairs over a set of labeled samples.

    ``(m, n)`` is in ``lt`` when ``T_m < T_n`` and either ``E_m = 1`` or both
    samples come from the same eye; ``gt`` is the mirror condition. Ties in
    ``T`` never form a pair.
    """
    t = np.asarray(times, dtype=float)
    e = np.asarray(events, dtype=int)
    ids = np.asarray([str(x) for x in eye_ids])
    same = ids[:, None] == ids[None, :]
    lt = (t[:, None] < t[None, :]) & ((e[:, None] == 1) | same)
    gt = (t[:, None] > t[None, :]) & ((e[None, :] == 1) | same)
    return ComparablePairSets(np.argwhere(lt), np.argwhere(gt))


def intra_subject_sets(n_pairs: int) -> ComparablePairSets:
    """Ranking pairs of an unlabeled batch: each later visit ranks above its earlier one."""
    j = np.arange(n_pairs)
    k = j + n_pairs
    return ComparablePairSets(np.column_stack([k, j]), np.column_stack([j, k]))


def _ranking(r, sets: ComparablePairSets, gamma):
    """Loss, d/drisk and d/dgamma of the pairwise logistic ranking loss."""
    dr = np.zeros_like(r)
    n = sets.size
    if n == 0:
        return 0.0, dr, 0.0
    total, dgamma = 0.0, 0.0
    for pairs, positive in ((sets.lt, True), (sets.gt, False)):
        if pairs.shape[0] == 0:
            continue
        m, k = pairs[:, 0], pairs[:, 1]
        diff = r[m] - r[k]
        p = sigmoid(gamma * diff)
        pc = np.clip(p, EPS, 1.0 - EPS)
        live = (p > EPS) & (p < 1.0 - EPS)
        if positive:
            total -= np.log(pc).sum()
            dp = np.where(live, -1.0 / pc, 0.0)
        else:
            total -= np.log1p(-pc).sum()
            dp = np.where(live, 1.0 / (1.0 - pc), 0.0)
        dx = dp * p * (1.0 - p) / n
        np.add.at(dr, m, dx * gamma)
        np.add.at(dr, k, -dx * gamma)
        dgamma += float(np.dot(dx, diff))
    return total / n, dr, dgamma


def ranking_loss(risks, sets: ComparablePairSets, gamma: float) -> float:
    """Mean negative log-likelihood of the pair orderings in ``sets``; 0 if empty."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    return float(_ranking(np.asarray(risks, dtype=float), sets, gamma)[0])


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def evaluate(batch: PairBatch, head: HyperplaneHead, encoder, mode=SUPERVISED,
             stop_target_gradient=False, with_gradients=True):
    """Loss breakdown and, optionally, gradients for every named parameter.

    Both branches run through the same encoder in one stacked pass, so the
    Siamese weight sharing shows up as a single accumulated gradient.
    """
    _check_mode(mode)
    if mode == SUPERVISED and not batch.labeled:
        raise ValueError("supervised loss needs a labeled batch")
    b = len(batch)
    emb, tape = encoder.forward(batch.stacked_features())
    r = head.risk(emb)
    r_j, r_k = r[:b], r[b:]
    alpha, gamma = head.alpha, head.gamma
    z0j = r_j + head.beta
    z0k = r_k + head.beta
    zf = r_j + alpha * batch.gap + head.beta
    p0j, p0k, pf = sigmoid(z0j), sigmoid(z0k), sigmoid(zf)

    dz0j = np.zeros(b)
    dz0k = np.zeros(b)
    dzf = np.zeros(b)

    cls = 0.0
    if mode == SUPERVISED:
        yj, yk = batch.stages_j, batch.stages_k
        for target, p, dz in ((yj, p0j, dz0j), (yk, p0k, dz0k), (yk, pf, dzf)):
            loss, d_pred, _ = _bce(target, p)
            cls += loss.mean()
            dz += d_pred * p * (1.0 - p) / b

    loss, d_pred, d_target = _bce(p0k, pf)
    cns = float(loss.mean())
    dzf += d_pred * pf * (1.0 - pf) / b
    if not stop_target_gradient:
        dz0k += d_target * p0k * (1.0 - p0k) / b

    if mode == SUPERVISED:
        sets = ranking_sets(*batch.stacked_labels())
    else:
        sets = intra_subject_sets(b)
    rnk, dr, dgamma = _ranking(r, sets, gamma)

    breakdown = LossBreakdown(float(cls), cns, float(rnk))
    if not with_gradients:
        return breakdown, None

    dr = dr.copy()
    dr[:b] += dz0j + dzf
    dr[b:] += dz0k
    grads_enc, _ = encoder.backward(tape, np.outer(dr, head.w))
    grads = grads_enc.named_arrays() if hasattr(grads_enc, "named_arrays") else dict(grads_enc)
    grads["head.w"] = emb.T @ dr
    grads["head.beta"] = np.array(dz0j.sum() + dz0k.sum() + dzf.sum())
    grads["head.alpha_raw"] = np.array(np.dot(dzf, batch.gap) * sigmoid(head.alpha_raw))
    grads["head.gamma_raw"] = np.array(dgamma * sigmoid(head.gamma_raw))
    return breakdown, grads


def classification_loss(batch, head, encoder) -> float:
    return evaluate(batch, head, encoder, SUPERVISED, with_gradients=False)[0].classification


def consistency_loss(batch, head, encoder) -> float:
    mode = SUPERVISED if batch.labeled else UNSUPERVISED
    return evaluate(batch, head, encoder, mode, with_gradients=False)[0].consistency


def total_loss(batch, head, encoder, mode=SUPERVISED):
    """``(total, breakdown)`` of the summed losses for ``mode``."""
    breakdown, _ = evaluate(batch, head, encoder, mode, with_gradients=False)
    return breakdown.total, breakdown


def loss_gradients(batch, head, encoder, mode=SUPERVISED, stop_target_gradient=False):
    """Gradients of the total loss keyed by parameter name."""
    return evaluate(batch, head, encoder, mode, stop_target_gradient)[1]
