import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gtl import evaluate
from gtl.rng import make_rng


def test_all_correct():
    r = evaluate.top1_accuracy([1, 2, 3], [1, 2, 3], [0, 1, 0])
    assert r.acc_mixed == 1.0
    assert r.acc_per_modality == {0: 1.0, 1: 1.0}


def test_hand_counted_case():
    r = evaluate.top1_accuracy(["a", "b"], ["a", "a"], [0, 1])
    assert r.acc_mixed == 0.5
    assert r.acc_per_modality == {0: 1.0, 1: 0.0}


def test_empty_modality_bucket_omitted():
    r = evaluate.top1_accuracy([1, 1], [1, 0], [2, 2])
    assert set(r.acc_per_modality) == {2}
    assert 0 not in r.acc_per_modality


def test_length_mismatch():
    with pytest.raises(ValueError, match="length mismatch"):
        evaluate.top1_accuracy([1], [1, 2], [0, 0])


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_mixed_is_count_weighted_combination(seed):
    rng = make_rng(seed)
    n = int(rng.integers(1, 60))
    preds = rng.integers(0, 4, size=n)
    labels = rng.integers(0, 4, size=n)
    modalities = rng.integers(0, 3, size=n)
    r = evaluate.top1_accuracy(preds, labels, modalities)
    weighted = sum(
        r.acc_per_modality[m] * r.total_by_modality[m] for m in r.total_by_modality
    ) / r.n_queries
    assert r.acc_mixed == weighted
    # and both equal the plain correct/total ratio
    assert r.acc_mixed == (preds == labels).sum() / n


def test_aggregate_single_episode():
    r = evaluate.top1_accuracy([1, 1], [1, 0], [0, 0])
    s = evaluate.aggregate_episodes([r])
    assert s.mean == 0.5 and s.std == 0.0 and s.ci95 == 0.0
    assert s.episode_count == 1


def test_aggregate_two_equal_episodes():
    r = evaluate.top1_accuracy([1], [1], [0])
    s = evaluate.aggregate_episodes([r, r])
    assert s.mean == 1.0 and s.std == 0.0


def test_aggregate_mean_of_two():
    r1 = evaluate.top1_accuracy([1, 1, 0, 0, 1], [1, 1, 1, 1, 0], [0] * 5)  # 0.4
    r2 = evaluate.top1_accuracy([1, 1, 1, 0, 0], [1, 1, 1, 1, 1], [0] * 5)  # 0.6
    s = evaluate.aggregate_episodes([r1, r2])
    assert s.mean == pytest.approx(0.5)


def test_aggregate_permutation_invariant():
    rng = make_rng(3)
    results = [
        evaluate.top1_accuracy(rng.integers(0, 2, 10), rng.integers(0, 2, 10),
                               rng.integers(0, 2, 10))
        for _ in range(8)
    ]
    a = evaluate.aggregate_episodes(results)
    b = evaluate.aggregate_episodes(list(reversed(results)))
    assert (a.mean, a.std, a.ci95) == (b.mean, b.std, b.ci95)
    assert a.per_modality_mean == b.per_modality_mean


def test_aggregate_empty_rejected():
    with pytest.raises(ValueError):
        evaluate.aggregate_episodes([])


def test_per_modality_mean_skips_absent_modality():
    r1 = evaluate.top1_accuracy([1, 1], [1, 1], [0, 0])
    r2 = evaluate.top1_accuracy([1, 0], [1, 1], [0, 1])
    s = evaluate.aggregate_episodes([r1, r2])
    assert s.per_modality_mean[0] == 1.0
    assert s.per_modality_mean[1] == 0.0  # only episode 2 has modality 1


def test_csv_rendering_stable():
    r1 = evaluate.top1_accuracy([1, 0], [1, 1], [0, 1])
    s = evaluate.aggregate_episodes([r1])
    rows = [evaluate.summary_row("all_way-full", 5, s)]
    text = evaluate.results_csv(rows)
    lines = text.splitlines()
    assert lines[0] == "setting,k,acc_mixed,acc_m0,acc_m1,std,ci95"
    assert lines[1] == "all_way-full,5,0.500000,1.000000,0.000000,0.000000,0.000000"
    assert evaluate.results_csv(rows) == text


def test_json_rendering():
    import json

    r = evaluate.top1_accuracy([1], [1], [0])
    rows = [evaluate.summary_row("s", 1, evaluate.aggregate_episodes([r]))]
    decoded = json.loads(evaluate.results_json(rows))
    assert decoded[0]["acc_mixed"] == 1.0
    assert decoded[0]["per_modality"] == {"0": 1.0}
