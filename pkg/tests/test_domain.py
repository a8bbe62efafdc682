import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_cohort
from survplanes.domain import (Cohort, SurvivalLabel, TimeNormalizer, Visit, derive_stage,
                               forecast_mask, normalize_time, read_cohort, split_cohort,
                               validate_cohort, write_cohort)


class TestNormalizeTime:
    @pytest.mark.parametrize("months, expected", [(36, 1.0), (0, 0.0), (18, 0.5)])
    def test_examples(self, months, expected):
        assert normalize_time(months) == expected

    def test_no_clamping_past_horizon(self):
        assert normalize_time(72) == 2.0

    def test_array_input(self):
        np.testing.assert_allclose(normalize_time(np.array([0, 9, 36])), [0, 0.25, 1])

    def test_negative_raises(self):
        with pytest.raises(ValueError):
            normalize_time(-1)

    def test_custom_horizon(self):
        assert TimeNormalizer(12)(6) == 0.5

    def test_bad_horizon(self):
        with pytest.raises(ValueError):
            TimeNormalizer(0)

    @given(st.floats(0, 1e4), st.floats(0, 1e4))
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        assert normalize_time(lo) <= normalize_time(hi)


class TestStage:
    @pytest.mark.parametrize("t, e, stage", [(-2, 1, 1), (6, 1, 0), (12, 0, 0), (0, 1, 1)])
    def test_examples(self, t, e, stage):
        assert derive_stage(SurvivalLabel(t, e)) == stage

    def test_censored_negative_time_rejected(self):
        with pytest.raises(ValueError):
            SurvivalLabel(-1, 0)

    def test_bad_event(self):
        with pytest.raises(ValueError):
            SurvivalLabel(1, 2)

    def test_forecast_mask(self):
        mask = forecast_mask([-2, 0, 6, 12], [1, 1, 1, 0])
        np.testing.assert_array_equal(mask, [False, False, True, True])


class TestVisitAndCohort:
    def test_visit_arrays_are_read_only(self):
        v = Visit("a", 0, [1.0, 2.0])
        with pytest.raises(ValueError):
            v.features[0] = 3.0

    def test_all_views_defaults_to_features(self):
        v = Visit("a", 0, [1.0, 2.0])
        assert len(v.all_views()) == 1
        v2 = Visit("a", 0, [1.0, 2.0], views=[[1, 1], [2, 2]])
        assert len(v2.all_views()) == 2

    def test_cohort_accessors(self):
        c = make_cohort({"a": [(0, 10, 1), (6, 4, 1)], "b": [(0, 20, 0)]})
        assert len(c) == 2
        assert c.n_visits == 3
        assert c.features().shape == (3, 2)
        np.testing.assert_array_equal(c.eye_index(), [0, 0, 1])
        t, e = c.label_arrays()
        np.testing.assert_array_equal(t, [10, 4, 20])
        assert not c.without_labels().labeled
        assert c.subset(["b"]).n_visits == 1

    def test_map_features(self):
        c = make_cohort({"a": [(0, 10, 1), (6, 4, 1)]})
        shifted = c.map_features(lambda x: x + 1)
        np.testing.assert_array_equal(shifted.features() - c.features(), 1.0)


class TestValidateCohort:
    def test_well_formed_two_eye_cohort(self):
        c = make_cohort({"a": [(0, 10, 1), (6, 4, 1)], "b": [(0, 20, 0), (12, 8, 0)]})
        assert validate_cohort(c).is_valid

    def test_tied_visit_times(self):
        c = make_cohort({"a": [(0, 20, 0), (6, 14, 0), (6, 14, 0)]})
        report = validate_cohort(c)
        assert len(report) == 1
        assert report.violations[0].kind == "ordering"

    def test_converter_label_drift(self):
        c = make_cohort({"a": [(0, 12, 1), (6, 7, 1)]})
        report = validate_cohort(c)
        assert len(report) == 1
        assert report.violations[0].kind == "label_consistency"

    def test_event_varies_within_eye(self):
        c = make_cohort({"a": [(0, 12, 1), (6, 6, 0)]})
        assert report_kinds(c) == ["label_consistency"]

    def test_dimension_and_non_finite(self):
        visits = [Visit("a", 0, [1.0, 2.0], SurvivalLabel(5, 0)),
                  Visit("a", 1, [1.0], SurvivalLabel(4, 0)),
                  Visit("a", 2, [np.nan, 1.0], SurvivalLabel(3, 0))]
        c = Cohort({"a": visits}, 2)
        assert sorted(report_kinds(c)) == ["dimension", "non_finite"]

    def test_label_presence_mismatch(self):
        c = Cohort({"a": (Visit("a", 0, [0.0], None),)}, 1, labeled=True)
        assert report_kinds(c) == ["missing_label"]
        c = Cohort({"a": (Visit("a", 0, [0.0], SurvivalLabel(1, 0)),)}, 1, labeled=False)
        assert report_kinds(c) == ["unexpected_label"]

    def test_never_raises_on_garbage(self):
        visits = (Visit("b", 5, [np.inf], None), Visit("a", 1, [1, 2, 3], SurvivalLabel(0, 1)))
        report = validate_cohort(Cohort({"a": visits}, 1))
        assert not report.is_valid


def report_kinds(cohort):
    return [v.kind for v in validate_cohort(cohort)]


class TestSplit:
    def test_disjoint_and_sized(self):
        c = make_cohort({f"e{i}": [(0, 10, 0)] for i in range(10)})
        parts = split_cohort(c, [5, 3, 2], seed=1)
        assert [len(p) for p in parts] == [5, 3, 2]
        ids = [e for p in parts for e in p.eye_ids]
        assert sorted(ids) == sorted(c.eye_ids)

    def test_too_many(self):
        c = make_cohort({"a": [(0, 10, 0)]})
        with pytest.raises(ValueError):
            split_cohort(c, [2])


class TestFileFormats:
    @pytest.mark.parametrize("suffix", [".jsonl", ".csv"])
    def test_round_trip(self, tmp_path, suffix):
        c = make_cohort({"a": [(0, 10.5, 1), (6, 4.5, 1)], "b": [(0, 20, 0)]}, d=3)
        path = tmp_path / f"c{suffix}"
        write_cohort(c, path)
        back = read_cohort(path)
        np.testing.assert_array_equal(back.features(), c.features())
        np.testing.assert_array_equal(back.label_arrays()[0], c.label_arrays()[0])
        assert back.eye_ids == c.eye_ids
        assert not (tmp_path / f"c{suffix}.tmp").exists()

    def test_views_round_trip(self, tmp_path):
        c = Cohort.from_visits([Visit("a", 0, [1, 2], None, views=[[1, 2], [3, 4]])])
        write_cohort(c, tmp_path / "v.jsonl")
        back = read_cohort(tmp_path / "v.jsonl")
        assert len(back.visits()[0].views) == 2
        assert not back.labeled

    def test_mixed_labels_rejected(self, tmp_path):
        path = tmp_path / "m.jsonl"
        recs = [{"eye_id": "a", "visit_time": 0, "features": [0], "T": 3, "E": 0},
                {"eye_id": "a", "visit_time": 1, "features": [0]}]
        path.write_text("\n".join(json.dumps(r) for r in recs))
        with pytest.raises(ValueError, match="mixes"):
            read_cohort(path)

    def test_missing_field(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(json.dumps({"eye_id": "a", "features": [0]}))
        with pytest.raises(ValueError, match="visit_time"):
            read_cohort(path)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(0.5, 12), st.floats(0, 50), st.integers(0, 1)),
                min_size=1, max_size=6))
def test_consistent_generated_eye_is_valid(rows):
    gaps, t0, e = zip(*rows)
    times = np.cumsum([0.0, *gaps[1:]])
    event = e[0]
    start = t0[0] + times[-1]
    labels = [start - t for t in times]
    c = make_cohort({"a": [(t, lab, event) for t, lab in zip(times, labels)]})
    assert validate_cohort(c).is_valid
