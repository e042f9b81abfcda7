import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nsbm.metrics import alignment_accuracy, anomaly_metrics, community_metrics, top_k_membership


def test_perfect_membership():
    truth = [0, 0, 1, 1, 2, 2]
    r = community_metrics(np.eye(3)[truth], truth)
    assert (r.precision, r.macro_f1, r.nmi) == (1.0, 1.0, 1.0)


def test_uniform_membership_hits_one_community():
    truth = np.repeat(np.arange(4), 5)
    r = community_metrics(np.full((20, 4), 0.25), truth)
    assert r.precision == pytest.approx(0.25)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_invariant_under_column_permutation(seed):
    rng = np.random.default_rng(seed)
    Z = rng.dirichlet(np.ones(4), size=15)
    truth = rng.integers(0, 3, size=15)
    perm = rng.permutation(4)
    a, b = community_metrics(Z, truth), community_metrics(Z[:, perm], truth)
    assert a.precision == pytest.approx(b.precision)
    assert a.macro_f1 == pytest.approx(b.macro_f1)
    assert 0 <= a.precision <= 1 and 0 <= a.macro_f1 <= 1


def test_pseudo_column_is_never_matched():
    Z = np.array([[0.1, 0.0, 0.9], [0.9, 0.1, 0.0], [0.0, 1.0, 0.0]])
    r = community_metrics(Z, [0, 0, 1], n_communities=2)
    # node 0 ranks the pseudo column first, so it is predicted nowhere
    assert r.macro_f1 == pytest.approx((2 / 3 + 1.0) / 2)
    assert r.precision == 1.0


def test_multi_label_uses_top_k():
    P = top_k_membership(np.array([[0.5, 0.3, 0.2], [0.2, 0.2, 0.6]]), [2, 1])
    assert P.tolist() == [[True, True, False], [False, False, True]]
    r = community_metrics(np.array([[0.5, 0.4, 0.1], [0.1, 0.8, 0.1]]), [[0, 1], [1]])
    assert r.macro_f1 == 1.0


def test_alignment_accuracy_cases():
    truth = np.stack([np.arange(10), np.arange(10)[::-1]], 1)
    assert alignment_accuracy(dict(truth.tolist()), truth) == 1.0
    assert alignment_accuracy(np.arange(10) + 100, truth) == 0.0
    half = np.where(np.arange(10) < 5, truth[:, 1], -1)
    assert alignment_accuracy(half, truth) == 0.5
    with pytest.raises(ValueError):
        alignment_accuracy({}, np.zeros((0, 2)))


def _truths():
    return [
        {"window": 0, "injected": True, "members": [1, 2, 3]},
        {"window": 1, "injected": False, "members": []},
        {"window": 2, "injected": True, "members": [5, 6]},
        {"window": 3, "injected": False, "members": []},
    ]


def test_anomaly_perfect_and_silent():
    truths = _truths()
    perfect = [{"alarm": t["injected"], "members": t["members"]} for t in truths]
    r = anomaly_metrics(perfect, truths)
    assert r.rec == (1.0, 1.0) and r.accuracy == 1.0 and r.extra_alarms == 0
    r = anomaly_metrics([{"alarm": False, "members": []}] * 4, truths)
    assert r.rec == (0.0, 0.0) and r.extra_alarms == 0


def test_anomaly_always_alarming_with_empty_sets():
    r = anomaly_metrics([{"alarm": True, "members": []}] * 4, _truths())
    assert r.rec == (1.0, 0.0)
    assert r.extra_alarms == 2


def test_anomaly_partial():
    reps = [
        {"alarm": True, "members": [1, 2, 9]},
        {"alarm": True, "members": [4]},
        {"alarm": False, "members": []},
        {"alarm": False, "members": []},
    ]
    r = anomaly_metrics(reps, _truths())
    assert r.alert_recall == 0.5
    assert r.member_recall == pytest.approx(2 / 3)
    assert r.accuracy == pytest.approx(2 / 4)
    assert r.extra_alarms == 1


def test_anomaly_misaligned_windows():
    with pytest.raises(ValueError):
        anomaly_metrics([{"window": 5, "alarm": False}], [{"window": 0, "injected": False}])
    with pytest.raises(ValueError):
        anomaly_metrics([], _truths())
