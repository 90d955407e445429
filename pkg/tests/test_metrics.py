import numpy as np
import pytest

from sedt.metrics import ClassScore, event_based_f1, segment_based_f1, tagging_f1

from oracles import max_collar_matching


class TestEventBased:
    def test_within_collar(self):
        rep = event_based_f1({"a": [("Dog", 1.0, 2.0)]}, {"a": [("Dog", 1.05, 2.10)]})
        assert rep.per_class["Dog"].tp == 1
        assert rep.per_class["Dog"].f1 == 1.0

    def test_onset_outside_collar(self):
        rep = event_based_f1({"a": [("Dog", 1.0, 2.0)]}, {"a": [("Dog", 1.5, 2.0)]})
        s = rep.per_class["Dog"]
        assert (s.tp, s.fp, s.fn) == (0, 1, 1)
        assert s.f1 == 0.0

    def test_offset_fraction_flag(self):
        refs = {"a": [("Dog", 1.0, 5.0)]}
        preds = {"a": [("Dog", 1.0, 5.5)]}
        assert event_based_f1(refs, preds).macro_f1 == 0.0
        assert event_based_f1(refs, preds, offset_fraction=0.2).macro_f1 == 1.0

    def test_perfect(self):
        refs = {"a": [("Dog", 1.0, 2.0), ("Cat", 0.5, 3.0)], "b": [("Cat", 4.0, 6.0)]}
        assert event_based_f1(refs, refs).macro_f1 == 1.0

    def test_wrong_class_does_not_match(self):
        rep = event_based_f1({"a": [("Dog", 1.0, 2.0)]}, {"a": [("Cat", 1.0, 2.0)]})
        assert rep.per_class["Dog"].fn == 1 and rep.per_class["Cat"].fp == 1

    def test_duplicate_prediction_lowers_precision(self):
        refs = {"a": [("Dog", 1.0, 2.0), ("Dog", 4.0, 5.0)]}
        preds = {"a": [("Dog", 1.0, 2.0), ("Dog", 4.2, 5.3)]}
        base = event_based_f1(refs, preds).per_class["Dog"]
        dup = event_based_f1(refs, {"a": preds["a"] + [("Dog", 1.0, 2.0)]}).per_class["Dog"]
        assert dup.precision < base.precision
        assert dup.f1 < base.f1

    def test_order_invariance(self):
        refs = {"a": [("Dog", 1.0, 2.0), ("Cat", 3.0, 4.0)], "b": [("Dog", 0.0, 1.0)]}
        preds = {"b": [("Dog", 0.1, 1.1)], "a": [("Cat", 3.0, 4.1), ("Dog", 1.1, 2.0)]}
        shuffled = {"a": list(reversed(preds["a"])), "b": preds["b"]}
        assert event_based_f1(refs, preds).to_json() == event_based_f1(refs, shuffled).to_json()

    def test_report_json(self):
        rep = event_based_f1({"a": [("Dog", 1.0, 2.0)]}, {"a": []})
        js = rep.to_json()
        assert js["protocol"]["collar_sec"] == 0.2
        assert js["per_class"]["Dog"]["fn"] == 1


def random_scene(rng, classes=("A", "B"), max_events=5, collar=0.2):
    """Random refs/preds with every pairwise boundary difference far from the collar.

    Preds are jittered refs (well inside the collar) or far-off decoys; ref
    events of the same class are separated by > 4 collars so no prediction can
    satisfy the collar for two references at once.
    """
    refs, preds = [], []
    for c in classes:
        n = int(rng.integers(0, max_events // len(classes) + 2))
        t = 0.0
        for _ in range(n):
            t += rng.uniform(1.0, 2.0)
            on, off = t, t + rng.uniform(0.3, 1.0)
            t = off
            refs.append((c, on, off))
            r = rng.random()
            if r < 0.5:
                preds.append((c, on + rng.uniform(-0.1, 0.1), off + rng.uniform(-0.1, 0.1)))
            elif r < 0.7:
                preds.append((c, on + rng.uniform(0.35, 0.6), off))
        if rng.random() < 0.3:
            preds.append((c, 50.0, 51.0))
    return refs, preds


def test_event_based_matches_exhaustive_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        refs, preds = random_scene(rng)
        rep = event_based_f1({"c": refs}, {"c": preds}, classes=["A", "B"])
        tp = sum(s.tp for s in rep.per_class.values())
        assert tp == max_collar_matching(refs, preds, 0.2)
        assert sum(s.fp for s in rep.per_class.values()) == len(preds) - tp
        assert sum(s.fn for s in rep.per_class.values()) == len(refs) - tp


class TestSegmentBased:
    def test_identical(self):
        refs = {"a": [("Dog", 1.2, 3.4)]}
        assert segment_based_f1(refs, refs, {"a": 10.0}).macro_f1 == 1.0

    def test_counting(self):
        refs = {"a": [("Dog", 0.0, 5.0)]}
        preds = {"a": [("Dog", 0.0, 10.0)]}
        s = segment_based_f1(refs, preds, {"a": 10.0}).per_class["Dog"]
        assert (s.tp, s.fp, s.fn) == (5, 5, 0)
        assert s.precision == 0.5 and s.recall == 1.0
        assert s.f1 == pytest.approx(2 / 3)

    def test_no_predictions(self):
        refs = {"a": [("Dog", 0.0, 5.0)]}
        assert segment_based_f1(refs, {}, {"a": 10.0}).macro_f1 == 0.0

    def test_partial_segment_overlap(self):
        refs = {"a": [("Dog", 0.9, 1.1)]}
        preds = {"a": [("Dog", 1.5, 1.6)]}
        s = segment_based_f1(refs, preds, {"a": 10.0}).per_class["Dog"]
        assert (s.tp, s.fp, s.fn) == (1, 0, 1)


class TestTagging:
    def test_perfect(self):
        refs = {"a": {"Dog"}, "b": {"Cat", "Dog"}}
        assert tagging_f1(refs, refs).macro_f1 == 1.0

    def test_counts(self):
        refs = {"a": {"Dog"}, "b": {"Dog"}, "c": set()}
        preds = {"a": {"Dog"}, "b": set(), "c": {"Dog"}}
        assert tagging_f1(refs, preds).per_class["Dog"].f1 == pytest.approx(0.5)

    def test_empty_predictions(self):
        assert tagging_f1({"a": {"Dog"}}, {"a": set()}).macro_f1 == 0.0


def test_zero_division_f1():
    assert ClassScore().f1 == 0.0
