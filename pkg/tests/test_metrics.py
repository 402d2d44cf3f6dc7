import warnings

import numpy as np
import pytest

from modens.errors import DataError
from modens.metrics import (
    AGGREGATE_COLUMNS,
    REPORT_COLUMNS,
    DetectionReport,
    aggregate,
    auroc,
    evaluate,
    fpr_at_tpr,
    read_csv,
    report_rows,
    subset_protocol,
    to_csv,
)
from modens.numkit import Rng


def test_fpr_hand_example():
    ind = np.arange(1, 21, dtype=float)  # 20 scores; threshold = 1st smallest
    fpr, lam = fpr_at_tpr(ind, np.array([0.5, 1.0, 1.5, 30.0]), 0.95)
    assert lam == 1.0
    assert fpr == 0.5  # 1.5 and 30 lie strictly above


def test_fpr_threshold_rank_is_robust_to_rounding():
    ind = np.arange(100, dtype=float)
    # (1 - 0.95) * 100 is 5.000000000000004 in floating point
    assert fpr_at_tpr(ind, ind, 0.95)[1] == 4.0
    assert fpr_at_tpr(ind, ind, 0.9)[1] == 9.0


def test_fpr_perfect_separation_and_errors():
    assert fpr_at_tpr([5, 6, 7], [1, 2, 3])[0] == 0.0
    with pytest.raises(DataError):
        fpr_at_tpr([], [1.0])
    with pytest.raises(DataError):
        fpr_at_tpr([1.0], [1.0], 1.0)


def test_auroc_known_values():
    assert auroc([1, 2, 3], [4, 5]) == 0.0
    assert auroc([4, 5], [1, 2, 3]) == 1.0
    assert auroc([1, 1], [1, 1]) == 0.5
    assert auroc([2, 0], [1]) == 0.5


def test_auroc_brute_force_random():
    g = Rng(9)
    for _ in range(10):
        a, b = np.round(g.normal(73), 1), np.round(g.normal(41) - 0.3, 1)
        d = a[:, None] - b[None, :]
        ref = ((d > 0).sum() + 0.5 * (d == 0).sum()) / d.size
        assert auroc(a, b) == pytest.approx(ref, abs=1e-12)


def test_evaluate_provenance():
    r = evaluate(np.arange(20.0), np.arange(10.0), detector_id="msp", mode_ids=("a",), dataset_id="x", k=1, subset_id=0)
    assert (r.n_ind, r.n_ood, r.detector_id, r.k) == (20, 10, "msp", 1)
    assert 0 <= r.fpr95 <= 1 and 0 <= r.auroc <= 1


def test_subset_protocol_rules():
    ids = [f"m{i}" for i in range(10)]
    assert subset_protocol(ids, 1) == [(i,) for i in ids]
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        assert subset_protocol(ids, 10) == [tuple(ids)]
        assert w
    subs = subset_protocol(ids, 4, 3, Rng(1))
    assert len(subs) == 3 and len(set(subs)) == 3
    assert all(len(s) == 4 and list(s) == sorted(s, key=ids.index) for s in subs)
    assert subs == subset_protocol(ids, 4, 3, Rng(1))
    assert len(subset_protocol(ids[:3], 2, 5)) == 3
    with pytest.raises(DataError):
        subset_protocol(ids, 11)


def _rep(det, fpr, auc, k=1):
    return DetectionReport(fpr, auc, 0.0, 10, 10, det, ("a",), "d", k, 0)


def test_aggregate_population_std():
    rows = aggregate([_rep("msp", 0.2, 0.9), _rep("msp", 0.4, 0.7), _rep("energy", 0.1, 0.5)])
    msp = next(r for r in rows if r["detector"] == "msp")
    assert msp["fpr95_mean"] == pytest.approx(0.3) and msp["fpr95_std"] == pytest.approx(0.1)
    assert next(r for r in rows if r["detector"] == "energy")["fpr95_std"] == 0.0


def test_csv_round_trip():
    reps = [_rep("msp", 0.1 + 1e-17, 0.3333333333333333)]
    text = to_csv(report_rows(reps), REPORT_COLUMNS)
    assert text.splitlines()[0] == ",".join(REPORT_COLUMNS)
    back = read_csv(text)
    assert float(back[0]["auroc"]) == 0.3333333333333333
    agg = to_csv(aggregate(reps), AGGREGATE_COLUMNS)
    assert agg.splitlines()[0] == "detector,dataset,k,fpr95_mean,fpr95_std,auroc_mean,auroc_std"
