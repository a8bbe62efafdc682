import numpy as np
import pytest

from survplanes.domain import (forecast_mask, read_cohort, split_cohort, validate_cohort,
                               write_cohort)
from survplanes.exceptions import UndefinedMetricError
from survplanes.metrics import concordance
from survplanes.synth import GroundTruth, SynthConfig, generate, oracle_concordance, shift_transform
from survplanes.trainer import TrainConfig, train


@pytest.fixture(scope="module")
def default_draw():
    return generate(SynthConfig())


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            SynthConfig.from_dict({"n_eye": 3})

    @pytest.mark.parametrize("bad", [dict(n_eyes=0), dict(informative_dims=9),
                                     dict(s0_high=1.5), dict(domain_shift_severity=2),
                                     dict(shift_matrix=[[1.0]])])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            SynthConfig(**bad)

    def test_round_trip(self):
        cfg = SynthConfig(n_eyes=10, seed=4)
        assert SynthConfig.from_dict(cfg.to_dict()) == cfg


class TestGenerate:
    def test_deterministic_latent(self):
        cfg = SynthConfig(n_eyes=20, noise_std=0, rate_log_sd=0, s0_low=0, s0_high=0,
                          converter_target_fraction=None, rate_log_mean=np.log(0.02))
        _, truth = generate(cfg)
        np.testing.assert_allclose(list(truth.conversion_time.values()), 1 / 0.02)

    def test_same_seed_identical(self, tmp_path):
        a, _ = generate(SynthConfig(n_eyes=30, seed=7))
        b, _ = generate(SynthConfig(n_eyes=30, seed=7))
        write_cohort(a, tmp_path / "a.jsonl")
        write_cohort(b, tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_labels_validate(self, default_draw):
        cohort, _ = default_draw
        assert validate_cohort(cohort).is_valid

    def test_converter_fraction(self, default_draw):
        cohort, _ = default_draw
        frac = np.mean([vs[0].label.event for vs in cohort.eyes.values()])
        assert abs(frac - 0.2) <= 0.05

    def test_converters_observed_after_conversion(self, default_draw):
        cohort, truth = default_draw
        for eye, visits in cohort.eyes.items():
            if visits[0].label.event == 1:
                assert 1 <= sum(v.stage for v in visits) <= 2
                assert visits[0].label.time == pytest.approx(truth.conversion_time[eye])

    def test_visit_schedule(self, default_draw):
        cohort, _ = default_draw
        for visits in cohort.eyes.values():
            gaps = np.diff([v.visit_time for v in visits])
            assert np.all((gaps >= 3) & (gaps <= 12))
            assert visits[0].visit_time == 0.0

    def test_first_feature_tracks_severity(self, default_draw):
        cohort, truth = default_draw
        x = cohort.features()[:, 0]
        severity = np.array([truth.baseline_severity[v.eye_id] + truth.rate[v.eye_id] * v.visit_time
                             for v in cohort])
        assert np.std(x - severity) == pytest.approx(0.03, rel=0.1)

    def test_views(self):
        cohort, _ = generate(SynthConfig(n_eyes=5, n_views=3))
        assert all(len(v.views) == 3 for v in cohort)

    def test_infeasible_fraction(self):
        with pytest.raises(ValueError):
            generate(SynthConfig(n_eyes=50, converter_target_fraction=0.99, max_rate_rescale=1.5))


class TestShift:
    def test_identity_at_zero_severity(self):
        b, c = shift_transform(SynthConfig())
        np.testing.assert_array_equal(b, np.eye(8))
        np.testing.assert_array_equal(c, 0.0)

    def test_shift_is_affine_map_of_same_eyes(self):
        base, _ = generate(SynthConfig(n_eyes=20, seed=2))
        cfg = SynthConfig(n_eyes=20, seed=2, domain_shift_severity=1.0)
        shifted, _ = generate(cfg)
        b, c = shift_transform(cfg)
        np.testing.assert_allclose(shifted.features(), base.features() @ b.T + c, atol=1e-12)
        np.testing.assert_array_equal(shifted.label_arrays()[0], base.label_arrays()[0])

    def test_well_conditioned(self):
        b, _ = shift_transform(SynthConfig(domain_shift_severity=1.0))
        eig = np.linalg.eigvalsh(b)
        assert eig.min() >= 0.2 - 1e-9 and eig.max() <= 3.0 + 1e-9


class TestOracle:
    def test_oracle_is_perfect(self, default_draw):
        cohort, truth = default_draw
        assert oracle_concordance(cohort, truth) == 1.0

    def test_censored_only(self):
        cohort, truth = generate(SynthConfig(n_eyes=10, converter_target_fraction=0.0))
        with pytest.raises(UndefinedMetricError):
            oracle_concordance(cohort, truth)

    def test_truth_round_trip(self, tmp_path, default_draw):
        _, truth = default_draw
        truth.write(tmp_path / "t.jsonl")
        assert GroundTruth.read(tmp_path / "t.jsonl") == truth


def test_file_round_trip_keeps_labels(tmp_path):
    cohort, _ = generate(SynthConfig(n_eyes=15, seed=1))
    write_cohort(cohort, tmp_path / "c.jsonl")
    back = read_cohort(tmp_path / "c.jsonl")
    np.testing.assert_array_equal(back.label_arrays()[0], cohort.label_arrays()[0])
    np.testing.assert_array_equal(back.features(), cohort.features())


def test_oracle_bounds_trained_model():
    oracle, trained = [], []
    for seed in range(3):
        cohort, truth = generate(SynthConfig(seed=seed))
        tr, va, te = split_cohort(cohort, [200, 50, 50], seed=seed)
        model, _ = train(tr, va, TrainConfig(epochs=30, updates_per_epoch=50, seed=seed))
        times, events = te.label_arrays()
        keep = forecast_mask(times, events)
        trained.append(concordance(model.predict_risk(te)[keep], times[keep], events[keep]))
        oracle.append(oracle_concordance(te, truth))
    assert np.mean(oracle) >= np.mean(trained)
