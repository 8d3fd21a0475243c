import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from hetembed.metrics import (
    METRICS,
    EvalBatch,
    EvalInstance,
    MetricDomainError,
    average_precision,
    coverage,
    hamming_loss,
    metric_report,
    one_error,
    oracle_metrics,
    ranking_loss,
    ranks,
    report_csv,
    report_table,
)

S = [0.9, 0.2, 0.5]


def one(scores, true, pred=None):
    q = len(scores)
    t = np.zeros(q, dtype=bool)
    t[list(true)] = True
    p = None
    if pred is not None:
        p = np.zeros(q, dtype=bool)
        p[list(pred)] = True
    return EvalBatch(np.array([scores]), t[None, :], None if p is None else p[None, :])


# ------------------------------------------------------------ hand examples


def test_hand_examples():
    assert one_error(one(S, {0})) == 0
    assert one_error(one(S, {1})) == 1
    assert one_error(one(S, {0, 1, 2})) == 0
    assert coverage(one(S, {0, 2})) == 1
    assert coverage(one(S, {0, 1, 2})) == 2
    assert ranking_loss(one(S, {0})) == 0
    assert ranking_loss(one(S, {1})) == 1
    assert average_precision(one(S, {2})) == 0.5
    assert average_precision(one(S, {0, 2})) == 1.0


def test_hamming_examples():
    assert hamming_loss(one(S, {0}, {0})) == 0
    assert hamming_loss(one([0.1] * 4, {0, 1}, {1, 2})) == pytest.approx(0.5)
    with pytest.raises(MetricDomainError):
        hamming_loss(one(S, {0}))


def test_ties_count_as_reversed():
    assert ranking_loss(one([0.5, 0.5, 0.1], {1})) == pytest.approx(0.5)
    assert ranking_loss(one([0.5, 0.5, 0.5], {0})) == 1.0


def test_rank_tie_break_by_label_index():
    np.testing.assert_array_equal(ranks(np.array([[0.5, 0.5, 0.9, 0.5]])), [[2, 3, 1, 4]])


def test_domain_errors():
    for f in (one_error, coverage, ranking_loss, average_precision):
        with pytest.raises(MetricDomainError):
            f(one(S, set()))
    with pytest.raises(MetricDomainError):
        ranking_loss(one(S, {0, 1, 2}))
    with pytest.raises(MetricDomainError):
        average_precision(EvalBatch(np.zeros((0, 3)), np.zeros((0, 3))))


def test_instances_and_batch_agree():
    inst = [EvalInstance(np.array(S), np.array([1, 0, 1], bool), np.array([1, 0, 0], bool))]
    b = EvalBatch.from_instances(inst)
    for f in (hamming_loss, one_error, coverage, ranking_loss, average_precision):
        assert f(inst) == f(b)


# ------------------------------------------------------------------ oracle


def random_batch(rng, m, q, ties, full_sets=False):
    if ties:
        scores = rng.integers(0, 3, size=(m, q)).astype(float) / 2
    else:
        scores = rng.standard_normal((m, q))
    true = rng.uniform(size=(m, q)) < rng.uniform(0.1, 0.7)
    true[np.arange(m), rng.integers(0, q, m)] = True
    if not full_sets:
        for i in range(m):
            if true[i].all():
                true[i, rng.integers(q)] = False
                if not true[i].any():
                    true[i, 0] = True
    pred = rng.uniform(size=(m, q)) < 0.4
    return EvalBatch(scores, true, pred)


PRODUCTION = {
    "hamming_loss": hamming_loss,
    "one_error": one_error,
    "coverage": coverage,
    "ranking_loss": ranking_loss,
    "average_precision": average_precision,
}


def test_oracle_agreement_200_batches():
    rng = np.random.default_rng(0)
    for i in range(200):
        b = random_batch(rng, int(rng.integers(1, 9)), int(rng.integers(2, 7)), ties=i % 2 == 0)
        ref = oracle_metrics(b)
        assert set(ref) == set(METRICS)
        for name, f in PRODUCTION.items():
            assert abs(f(b) - ref[name]) <= 1e-12, name


def test_oracle_omits_ranking_loss_on_full_sets():
    b = EvalBatch(np.array([[0.3, 0.1]]), np.array([[True, True]]))
    ref = oracle_metrics(b)
    assert "ranking_loss" not in ref and "hamming_loss" not in ref


def test_oracle_limits():
    with pytest.raises(ValueError):
        oracle_metrics(EvalBatch(np.zeros((1, 11)), np.ones((1, 11))))


def test_single_label_one_error_vs_ranking_loss():
    rng = np.random.default_rng(5)
    for _ in range(100):
        q = int(rng.integers(2, 7))
        scores = rng.standard_normal(q)
        label = int(rng.integers(q))
        b = one(scores, {label})
        assert (one_error(b) == 0) == (ranking_loss(b) == 0)


# -------------------------------------------------------------- properties


@st.composite
def tie_free_batches(draw):
    # distinct multiples of 1/8 per row stay distinct under both transforms below
    m = draw(st.integers(1, 8))
    q = draw(st.integers(2, 6))
    rows = [draw(st.lists(st.integers(-16, 16), min_size=q, max_size=q, unique=True)) for _ in range(m)]
    scores = np.array(rows, dtype=float) / 8
    true = draw(hnp.arrays(bool, (m, q)))
    true[:, 0] |= ~true.any(axis=1)
    return EvalBatch(scores, true)


@given(tie_free_batches())
def test_invariant_under_increasing_transforms(b):
    for transform in (lambda x: 2 * x + 1, np.tanh):
        t = EvalBatch(transform(b.scores), b.true)
        assert one_error(t) == one_error(b)
        assert coverage(t) == coverage(b)
        assert average_precision(t) == pytest.approx(average_precision(b), abs=1e-12)
        usable = ~b.true.all(axis=1)
        if usable.any():
            assert ranking_loss(t.subset(usable)) == ranking_loss(b.subset(usable))


@given(tie_free_batches())
def test_range_bounds(b):
    q = b.scores.shape[1]
    assert 0 <= one_error(b) <= 1
    assert 0 <= coverage(b) <= q - 1
    assert 0 < average_precision(b) <= 1
    usable = ~b.true.all(axis=1)
    if usable.any():
        assert 0 <= ranking_loss(b.subset(usable)) <= 1
    pred = b.scores > 0
    assert 0 <= hamming_loss(EvalBatch(b.scores, b.true, pred)) <= 1


@given(tie_free_batches())
def test_perfect_prediction_identities(b):
    # true labels strictly above every false label
    perfect = np.where(b.true, 10.0 + b.scores, b.scores - 10.0)
    pb = EvalBatch(perfect, b.true, b.true)
    assert hamming_loss(pb) == 0
    assert one_error(pb) == 0
    assert average_precision(pb) == 1
    assert coverage(pb) == np.mean(b.true.sum(axis=1) - 1)
    usable = ~b.true.all(axis=1)
    if usable.any():
        assert ranking_loss(pb.subset(usable)) == 0


# ------------------------------------------------------------------ report


def test_report_skips_and_counts():
    true = np.array([[1, 0, 0], [1, 1, 1], [0, 0, 0]], bool)
    b = EvalBatch(np.array([S, S, S]), true, true)
    rows = {r.metric: r for r in metric_report(b)}
    assert rows["hamming_loss"].instances_used == 3
    assert rows["average_precision"].instances_used == 2
    assert rows["average_precision"].instances_skipped == 1
    assert rows["ranking_loss"].instances_used == 1
    assert rows["ranking_loss"].instances_skipped == 2
    text = report_csv(metric_report(b))
    assert text.splitlines()[0] == "metric,value,instances_used,instances_skipped"
    assert len(text.splitlines()) == 6
    assert "average_precision" in report_table(metric_report(b))


def test_report_all_unusable_gives_nan():
    b = EvalBatch(np.array([S]), np.array([[1, 1, 1]], bool))
    rows = {r.metric: r for r in metric_report(b)}
    assert np.isnan(rows["ranking_loss"].value) and rows["ranking_loss"].instances_used == 0
