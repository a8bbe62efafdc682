import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from survplanes.domain import Cohort, SurvivalLabel, Visit  # noqa: E402
from survplanes.encoder import EncoderParams  # noqa: E402
from survplanes.head import HyperplaneHead  # noqa: E402
from survplanes.losses import PairBatch  # noqa: E402


def random_batch(rng, d, b, labeled=True, n_eyes=None):
    """Random pairs with positive gaps and internally consistent labels."""
    n_eyes = b if n_eyes is None else n_eyes
    eyes = tuple(f"e{rng.integers(n_eyes)}" for _ in range(b))
    gap_months = rng.uniform(1.0, 36.0, size=b)
    kwargs = {}
    if labeled:
        events = rng.integers(0, 2, size=b)
        t_k = rng.uniform(-6.0, 30.0, size=b)
        t_k = np.where(events == 0, np.abs(t_k), t_k)
        t_j = t_k + gap_months
        kwargs = dict(times_j=t_j, events_j=events, times_k=t_k, events_k=events)
    return PairBatch(rng.normal(size=(b, d)), rng.normal(size=(b, d)), gap_months / 36.0,
                     eyes, **kwargs)


def random_model(rng, d, hidden=(5, 3)):
    enc = EncoderParams.initialize(d, hidden, rng)
    enc = EncoderParams(tuple(w * 2.0 for w in enc.weights),
                        tuple(rng.normal(scale=0.3, size=b.shape) for b in enc.biases))
    head = HyperplaneHead(rng.normal(size=hidden[-1]), rng.normal(scale=0.5),
                          rng.normal(scale=0.5), rng.normal(scale=0.5))
    return enc, head


def make_cohort(layout, d=2, labeled=True):
    """``layout``: ``{eye: [(visit_time, T, E), ...]}``; features are ``[t, 0, ...]``."""
    visits = []
    for eye, rows in layout.items():
        for t, big_t, e in rows:
            label = SurvivalLabel(big_t, e) if labeled else None
            visits.append(Visit(eye, t, [t] + [0.0] * (d - 1), label))
    return Cohort.from_visits(visits, feature_dim=d)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
