import numpy as np
import pytest

from gcr.metrics import (EvalMatrix, RoutedRecord, UndefinedMetricError, auroc,
                         average_precision, conditional_auroc, forgetting_measure,
                         overall_fm, pixel_metrics, routing_accuracy)


def pairwise_auroc_oracle(scores, labels):
    """O(n^2) pair counting: P(pos > neg) + 0.5 P(pos == neg)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def threshold_sweep_ap_oracle(scores, labels):
    """Exhaustive threshold enumeration over descending unique scores."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = labels.sum()
    ap = 0.0
    prev_recall = 0.0
    for thr in sorted(set(scores), reverse=True):
        keep = scores >= thr
        tp = int((labels[keep] == 1).sum())
        precision = tp / keep.sum()
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def _random_scored_set(rng, n_max=50):
    n = int(rng.integers(2, n_max + 1))
    scores = rng.standard_normal(n)
    if rng.random() < 0.5:  # inject ties
        scores = np.round(scores, 1)
    labels = rng.integers(0, 2, size=n)
    if labels.sum() == 0:
        labels[0] = 1
    if labels.sum() == n:
        labels[0] = 0
    return scores, labels


def test_auroc_examples():
    assert auroc([0.9, 0.1], [1, 0]) == 1.0
    assert auroc([0.5, 0.5], [1, 0]) == 0.5


def test_auroc_matches_pair_counting(rng):
    for _ in range(100):
        scores, labels = _random_scored_set(rng)
        assert auroc(scores, labels) == pytest.approx(
            pairwise_auroc_oracle(scores, labels), abs=1e-12)


def test_auroc_single_class_undefined():
    with pytest.raises(UndefinedMetricError):
        auroc([1.0, 2.0], [1, 1])
    with pytest.raises(UndefinedMetricError):
        auroc([1.0, 2.0], [0, 0])


def test_ap_examples():
    assert average_precision([5.0, 1.0, 0.5], [1, 0, 0]) == 1.0
    assert average_precision([3.0, 2.0, 1.0], [0, 1, 0]) == 0.5


def test_ap_matches_threshold_sweep(rng):
    for _ in range(100):
        scores, labels = _random_scored_set(rng)
        assert average_precision(scores, labels) == pytest.approx(
            threshold_sweep_ap_oracle(scores, labels), abs=1e-12)


def test_ap_no_positives_undefined():
    with pytest.raises(UndefinedMetricError):
        average_precision([1.0, 2.0], [0, 0])


def test_rank_metrics_invariant_to_monotone_transform(rng):
    for _ in range(20):
        scores, labels = _random_scored_set(rng)
        a0 = auroc(scores, labels)
        p0 = average_precision(scores, labels)
        for f in (np.exp, lambda s: 3.0 * s + 11.0):
            assert auroc(f(scores), labels) == pytest.approx(a0, abs=1e-12)
            assert average_precision(f(scores), labels) == pytest.approx(p0, abs=1e-12)


def test_auroc_label_flip(rng):
    for _ in range(20):
        n = int(rng.integers(4, 30))
        scores = rng.permutation(n).astype(np.float64)  # no ties
        labels = rng.integers(0, 2, size=n)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        assert auroc(scores, 1 - labels) == pytest.approx(1.0 - auroc(scores, labels),
                                                          abs=1e-12)


# ---------------------------------------------------------------------------
# pixel metrics
# ---------------------------------------------------------------------------

def test_pixel_metrics_perfect():
    mask = np.zeros((4, 4))
    mask[1:3, 1:3] = 1
    p_auroc, p_ap = pixel_metrics([(mask.astype(float), mask)])
    assert p_auroc == 1.0 and p_ap == 1.0


def test_pixel_metrics_constant_maps():
    mask = np.zeros((4, 4))
    mask[0, 0] = 1
    p_auroc, _ = pixel_metrics([(np.full((4, 4), 0.7), mask)])
    assert p_auroc == 0.5


def test_pixel_metrics_equal_flattened(rng):
    maps = [rng.uniform(0, 1, size=(5, 5)) for _ in range(3)]
    masks = [(rng.uniform(0, 1, size=(5, 5)) > 0.7).astype(np.uint8) for _ in range(3)]
    masks[0][0, 0] = 1
    p_auroc, p_ap = pixel_metrics(list(zip(maps, masks)))
    flat_s = np.concatenate([m.reshape(-1) for m in maps])
    flat_l = np.concatenate([m.reshape(-1) for m in masks])
    assert p_auroc == auroc(flat_s, flat_l)
    assert p_ap == average_precision(flat_s, flat_l)


def test_pixel_metrics_errors(rng):
    with pytest.raises(UndefinedMetricError, match="no anomalous"):
        pixel_metrics([(np.ones((2, 2)), np.zeros((2, 2)))])
    with pytest.raises(ValueError, match="shape mismatch"):
        pixel_metrics([(np.ones((2, 2)), np.ones((3, 3)))])


# ---------------------------------------------------------------------------
# routing diagnostics
# ---------------------------------------------------------------------------

def _rec(true, routed, label, score=0.0):
    return RoutedRecord("img", true, routed, label, score)


def test_routing_accuracy():
    recs = [_rec("a", "a", 0), _rec("a", "b", 1)]
    assert routing_accuracy([_rec("a", "a", 0)]) == 1.0
    assert routing_accuracy(recs) == 0.5
    assert routing_accuracy(recs, "normal") == 1.0
    assert routing_accuracy(recs, "anomaly") == 0.0
    with pytest.raises(UndefinedMetricError, match="empty"):
        routing_accuracy([_rec("a", "a", 0)], "anomaly")


def test_conditional_auroc_perfect_routing():
    recs = [_rec("a", "a", 0, 0.1), _rec("a", "a", 1, 0.9)]
    assert conditional_auroc(recs, "routed_correct") == auroc([0.1, 0.9], [0, 1])
    with pytest.raises(UndefinedMetricError):
        conditional_auroc(recs, "routed_wrong")


def test_conditional_auroc_matches_filter_then_metric(rng):
    recs = []
    for i in range(60):
        true = f"c{rng.integers(0, 3)}"
        routed = f"c{rng.integers(0, 3)}"
        recs.append(RoutedRecord(f"i{i}", true, routed,
                                 int(rng.integers(0, 2)), float(rng.standard_normal())))
    subset = [r for r in recs if r.routed_category == r.true_category]
    expected = auroc([r.score for r in subset], [r.image_label for r in subset])
    assert conditional_auroc(recs, "routed_correct") == expected


# ---------------------------------------------------------------------------
# forgetting
# ---------------------------------------------------------------------------

def _matrix(rows):
    T = len(rows)
    vals = np.full((T, T), np.nan)
    for i, row in enumerate(rows):
        for j, v in enumerate(row):
            vals[i, i + j] = v
    return EvalMatrix(T=T, values=vals)


def test_fm_hand_example():
    m = _matrix([[0.9, 0.95, 0.9], [0.8, 0.8], [0.7]])
    assert forgetting_measure(m, 1) == pytest.approx(0.05)
    assert forgetting_measure(m, 2) == 0.0
    assert overall_fm(m) == pytest.approx(0.025)


def test_fm_constant_rows_zero():
    m = _matrix([[0.9, 0.9, 0.9], [0.8, 0.8], [0.7]])
    assert overall_fm(m) == 0.0


def test_fm_nonnegative_and_zero_on_improvement(rng):
    for _ in range(50):
        T = int(rng.integers(2, 6))
        rows = [list(rng.uniform(0, 1, size=T - i)) for i in range(T)]
        m = _matrix(rows)
        for i in range(1, T):
            assert forgetting_measure(m, i) >= 0.0
    # non-decreasing with max at T -> zero forgetting
    m = _matrix([[0.5, 0.6, 0.7], [0.6, 0.9], [0.4]])
    assert forgetting_measure(m, 1) == 0.0
    assert forgetting_measure(m, 2) == 0.0


def test_fm_domain_errors():
    m = _matrix([[0.5]])
    with pytest.raises(ValueError, match="T >= 2"):
        overall_fm(m)
    m2 = _matrix([[0.5, 0.6], [0.7]])
    with pytest.raises(ValueError):
        forgetting_measure(m2, 2)  # i must be <= T-1


def test_eval_matrix_validation():
    with pytest.raises(ValueError, match="outside"):
        _matrix([[1.5, 0.5], [0.5]])
    vals = np.full((2, 2), 0.5)  # lower entry (2,1) must be absent
    with pytest.raises(ValueError, match="absent"):
        EvalMatrix(T=2, values=vals)
    m = _matrix([[0.25, 0.75], [0.5]])
    assert m.get(1, 2) == 0.75
    with pytest.raises(ValueError, match="undefined"):
        m.get(2, 1)
