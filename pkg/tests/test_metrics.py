"""BAKS/BAUS/final against an independent per-class tally oracle."""

from __future__ import annotations

import math
from collections import defaultdict

import numpy as np
import pytest

from openreid import NEW_INDIVIDUAL
from openreid.errors import UndefinedMetricError, ValidationError
from openreid.metrics import EvalItem, EvaluationSet, ScoreReport, baks, baus, final_score


def build_eval(truths, preds, known, unknown):
    items = [
        EvalItem(image_id=f"q{i}", true_individual=t, predicted=p)
        for i, (t, p) in enumerate(zip(truths, preds))
    ]
    return EvaluationSet.from_items(items, known, unknown)


def oracle_scores(truths, preds, known, unknown):
    """Brute-force per-class accuracy tally, independent of the implementation."""
    per_class = defaultdict(list)
    for t, p in zip(truths, preds):
        per_class[t].append(p)
    baks_val = sum(
        sum(1 for p in per_class[c] if p == c) / len(per_class[c]) for c in known
    ) / len(known) if known else None
    baus_val = sum(
        sum(1 for p in per_class[c] if p == NEW_INDIVIDUAL) / len(per_class[c]) for c in unknown
    ) / len(unknown) if unknown else None
    return baks_val, baus_val


def test_all_correct_is_one():
    ev = build_eval(["a", "a", "b", "u"], ["a", "a", "b", NEW_INDIVIDUAL], {"a", "b"}, {"u"})
    assert baks(ev) == 1.0
    assert baus(ev) == 1.0


def test_worked_baks_example():
    # y=[a,a,b,b,b], yhat=[a,?,b,b,NEW] -> (1/2 + 2/3)/2 = 7/12
    ev = build_eval(
        ["a", "a", "b", "b", "b"],
        ["a", "c", "b", "b", NEW_INDIVIDUAL],
        {"a", "b"},
        set(),
    )
    assert baks(ev) == pytest.approx(7 / 12, abs=1e-12)


def test_worked_baus_example():
    # u1: 2 images, 1 flagged; u2: 1 image, flagged -> (0.5 + 1)/2
    ev = build_eval(
        ["u1", "u1", "u2"],
        [NEW_INDIVIDUAL, "a", NEW_INDIVIDUAL],
        {"a"},
        {"u1", "u2"},
    )
    assert baus(ev) == pytest.approx(0.75, abs=1e-12)


def test_all_known_wrong_is_zero():
    ev = build_eval(["a", "b"], ["b", NEW_INDIVIDUAL], {"a", "b"}, set())
    assert baks(ev) == 0.0


def test_new_individual_counts_against_known():
    ev = build_eval(["a"], [NEW_INDIVIDUAL], {"a"}, set())
    assert baks(ev) == 0.0


def test_unknown_predicted_as_known_contributes_zero():
    ev = build_eval(["u"], ["a"], set(), {"u"})
    assert baus(ev) == 0.0


def test_empty_known_raises():
    ev = build_eval(["u"], [NEW_INDIVIDUAL], set(), {"u"})
    with pytest.raises(UndefinedMetricError):
        baks(ev)


def test_empty_unknown_raises():
    ev = build_eval(["a"], ["a"], {"a"}, set())
    with pytest.raises(UndefinedMetricError):
        baus(ev)


def test_final_score_cases():
    assert final_score(1.0, 1.0) == 1.0
    assert final_score(0.0, 0.9) == 0.0
    assert final_score(0.25, 1.0) == 0.5
    assert final_score(0.3, 0.7) == final_score(0.7, 0.3)
    with pytest.raises(ValidationError):
        final_score(1.2, 0.5)


def random_eval(rng, max_individuals=20, max_images=200):
    n_ind = int(rng.integers(2, max_individuals + 1))
    names = [f"c{j}" for j in range(n_ind)]
    known = set(names[: max(1, n_ind // 2)])
    unknown = set(names) - known
    if not unknown:
        unknown = {names[-1]}
        known -= unknown
    n = int(rng.integers(len(names), max_images + 1))
    truths = [names[int(rng.integers(n_ind))] for _ in range(n)]
    truths.extend(names)  # every individual appears at least once
    pool = names + [NEW_INDIVIDUAL]
    preds = [pool[int(rng.integers(len(pool)))] for _ in truths]
    return truths, preds, known, unknown


def test_random_sets_match_oracle():
    rng = np.random.Generator(np.random.PCG64(123))
    for _ in range(200):
        truths, preds, known, unknown = random_eval(rng)
        ev = build_eval(truths, preds, known, unknown)
        ob, ou = oracle_scores(truths, preds, known, unknown)
        assert abs(baks(ev) - ob) < 1e-12
        assert abs(baus(ev) - ou) < 1e-12
        assert 0.0 <= baks(ev) <= 1.0
        assert 0.0 <= baus(ev) <= 1.0


def test_permutation_invariance():
    rng = np.random.Generator(np.random.PCG64(5))
    truths, preds, known, unknown = random_eval(rng)
    ev = build_eval(truths, preds, known, unknown)
    order = rng.permutation(len(truths))
    ev2 = build_eval([truths[i] for i in order], [preds[i] for i in order], known, unknown)
    assert baks(ev) == baks(ev2)
    assert baus(ev) == baus(ev2)


def test_balanced_duplication_invariance():
    # duplicating an individual's block while preserving its correct fraction
    truths = ["a", "a", "b"]
    preds = ["a", "x", "b"]
    ev1 = build_eval(truths, preds, {"a", "b"}, set())
    ev2 = build_eval(truths + ["a", "a"], preds + ["a", "x"], {"a", "b"}, set())
    assert baks(ev1) == baks(ev2)


def test_score_report_consistency():
    ev = build_eval(["a", "u"], ["a", NEW_INDIVIDUAL], {"a"}, {"u"})
    report = ScoreReport.compute(ev)
    assert report.final**2 == pytest.approx(report.baks * report.baus, abs=1e-12)
    assert '"final"' in report.to_json()


def test_missing_prediction_rejected():
    items = [EvalItem("q0", "a")]
    ev = EvaluationSet.from_items(items, {"a"}, set())
    with pytest.raises(ValidationError):
        baks(ev)
    with pytest.raises(ValidationError):
        ev.with_predictions({})
