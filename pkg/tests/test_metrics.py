import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from usforce import metrics
from usforce import training as Tr
from oracles import loop_accuracy, loop_mean, loop_rmse, loop_std


def random_ledger(rng):
    task = "force" if rng.random() < 0.5 else "skill"
    subjects = [f"S{i + 1:02d}" for i in range(int(rng.integers(1, 4)))]
    skills = list(range(5)) if task == "force" else [None]
    folds, iters = int(rng.integers(2, 6)), int(rng.integers(1, 4))
    recs = []
    for s in subjects:
        for k in skills:
            for f in range(1, folds + 1):
                for i in range(1, iters + 1):
                    scale = 4.0 if task == "force" else 100.0
                    recs.append(Tr.LedgerRecord(task, s, k, f, i, float(rng.random() * scale),
                                                float(rng.random() * scale)))
    return task, Tr.ExperimentLedger(recs)


def oracle_groups(ledger, key):
    groups = {}
    for r in ledger.records:
        groups.setdefault(getattr(r, key), []).append(r)
    return groups


def test_thousand_random_ledgers_match_brute_force():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        task, led = random_ledger(rng)
        keys = ["fold", "subject"] + (["skill"] if task == "force" else [])
        for key in keys:
            groups = oracle_groups(led, key)
            rows = metrics.aggregate(led, key)
            assert [r.key for r in rows] == [str(k) for k in sorted(groups)]
            for row in rows:
                rs = groups[type(next(iter(groups)))(row.key)]
                tr = [r.train_metric for r in rs]
                te = [r.test_metric for r in rs]
                assert row.count == len(rs)
                # Same summation order as the oracle: bitwise equality.
                assert row.mu_train == loop_mean(tr) and row.mu_test == loop_mean(te)
                assert row.sigma_train == loop_std(tr) and row.sigma_test == loop_std(te)
        allrow = metrics.overall(led)
        te = [r.test_metric for r in led.records]
        assert allrow.mu_test == loop_mean(te) and allrow.sigma_test == loop_std(te)


def test_rmse_and_accuracy_match_loops():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        n = int(rng.integers(1, 200))
        p, t = rng.uniform(0, 4, n), rng.uniform(0, 4, n)
        assert abs(metrics.rmse(p, t) - loop_rmse(p, t)) <= 1e-12
        a, b = rng.integers(0, 5, n), rng.integers(0, 5, n)
        assert metrics.accuracy(a, b) == loop_accuracy(a, b)


def test_accuracy_binary_reduces_to_tp_tn_form():
    pred = np.array([1, 1, 0, 0, 1, 0])
    true = np.array([1, 0, 0, 1, 1, 0])
    tp = np.sum((pred == 1) & (true == 1))
    tn = np.sum((pred == 0) & (true == 0))
    assert metrics.accuracy(pred, true) == (tp + tn) / len(pred) * 100


def test_rmse_hand_values():
    assert metrics.rmse([0, 0], [3, 4]) == pytest.approx(math.sqrt(12.5))
    assert metrics.rmse([1.0], [1.0]) == 0.0


def test_population_std():
    assert metrics.std([2, 4, 4, 4, 5, 5, 7, 9]) == 2.0
    assert metrics.std([1.0, 3.0], ddof=1) == pytest.approx(math.sqrt(2))
    assert metrics.std([5.0]) == 0.0


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
def test_mean_std_bounds(vals):
    mu, sd = metrics.mean(vals), metrics.std(vals)
    assert min(vals) - 1e-6 <= mu <= max(vals) + 1e-6
    assert sd >= 0


def test_empty_and_shape_errors():
    for fn in (metrics.mean, metrics.std):
        with pytest.raises(ValueError, match="empty"):
            fn([])
    with pytest.raises(ValueError):
        metrics.rmse([1, 2], [1])
    with pytest.raises(ValueError):
        metrics.accuracy([], [])


def test_aggregate_errors():
    led = Tr.ExperimentLedger([Tr.LedgerRecord("skill", "S01", None, 1, 1, 90.0, 80.0)])
    with pytest.raises(ValueError, match="group_by"):
        metrics.aggregate(led, "iteration")
    with pytest.raises(ValueError, match="skill"):
        metrics.aggregate(led, "skill")
    with pytest.raises(ValueError, match="empty"):
        metrics.aggregate(Tr.ExperimentLedger(), "fold")


def test_percent_of_range_and_table():
    led = Tr.ExperimentLedger([Tr.LedgerRecord("force", "S01", 0, f, 1, 0.2, 0.4 + 0.1 * f)
                               for f in range(1, 3)])
    rows = metrics.aggregate(led, "skill")
    assert rows[0].percent_of_range(0.4) == 10.0
    text = metrics.summary_tsv(rows, with_percent=True)
    head, line = text.splitlines()
    assert head.split("\t")[0] == "skill" and len(head.split("\t")) == 9
    vals = line.split("\t")
    assert vals[3] == "0.5500" and vals[7] == "13.7500"
