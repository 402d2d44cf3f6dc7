import numpy as np
import pytest

from modens import detectors as det
from modens import ensemble as ens
from modens.errors import DataError, ShapeError
from modens.model import OutputDump


def test_mean_is_order_invariant(dumps, modes):
    a = ens.ModeSet(dumps["test"], modes)
    b = ens.ModeSet(dumps["test"][::-1], modes[::-1])
    assert np.allclose(ens.ens_logits(a), ens.ens_logits(b), atol=1e-12)
    assert np.allclose(ens.ens_score_energy(a).scores, ens.ens_score_energy(b).scores, atol=1e-6)
    assert a.mode_ids == ("seed1", "seed2", "seed3")


def test_ensemble_logits_are_the_mean(dumps):
    ms = ens.ModeSet(dumps["near_ood"])
    ref = np.mean([d.logits.astype(np.float64) for d in dumps["near_ood"]], axis=0)
    assert np.array_equal(ens.ens_logits(ms), ref)
    ref_e = np.log(np.exp(ref).sum(axis=1))
    assert np.allclose(ens.ens_score_energy(ms).scores, ref_e, atol=1e-5)


def test_single_mode_identity_all_detectors(dumps, modes, bench):
    ck, te, tr = modes[1], dumps["far_ood"][1], dumps["train"][1]
    one, one_tr = ens.ModeSet([te], [ck]), ens.ModeSet([tr], [ck])
    y = bench["train"].y
    pairs = [
        (ens.ens_score_msp(one), det.score_msp(te)),
        (ens.ens_score_odin(one, 1000.0), det.score_odin(te, 1000.0)),
        (ens.ens_score_energy(one), det.score_energy(te)),
        (ens.ens_score_mahalanobis(ens.ens_fit_mahalanobis(one_tr, y), one),
         det.score_mahalanobis(det.fit_mahalanobis(tr.penultimate, y), te)),
        (ens.ens_score_knn(one, ens.ens_build_knn(one_tr)), det.score_knn(det.build_knn(tr.penultimate), te)),
        (ens.ens_score_rankfeat(one), det.score_rankfeat(te, ck)),
        (ens.ens_score_gradnorm(one), det.score_gradnorm(te)),
    ]
    for a, b in pairs:
        assert a.detector_id == b.detector_id
        assert np.max(np.abs(a.scores - b.scores)) <= 1e-6


def test_duplicate_modes_idempotent(dumps, modes):
    d = dumps["scale_ood"][0]
    one, four = ens.ModeSet([d], [modes[0]]), ens.ModeSet([d] * 4, [modes[0]] * 4)
    for f in (ens.ens_score_msp, ens.ens_score_energy, ens.ens_score_odin, ens.ens_score_rankfeat):
        assert np.array_equal(f(one).scores, f(four).scores)


def test_odin_perturbed_ensemble(dumps, modes, bench):
    x = bench["test"].x[:15]
    sub = [OutputDump(d.logits[:15], d.penultimate[:15], d.feature_matrix[:15], d.mode_id, "test") for d in dumps["test"]]
    ms = ens.ModeSet(sub, modes)
    per = [det.odin_logits(d, 0.005, 1000.0, c, x) for d, c in zip(sub, modes)]
    z = np.mean(per, axis=0) / 1000.0
    ref = (np.exp(z - z.max(axis=1, keepdims=True)) / np.exp(z - z.max(axis=1, keepdims=True)).sum(axis=1, keepdims=True)).max(axis=1)
    assert np.allclose(ens.ens_score_odin(ms, 1000.0, 0.005, x).scores, ref, atol=1e-7)


def test_modeset_validation(dumps, modes):
    with pytest.raises(DataError):
        ens.ModeSet([])
    with pytest.raises(ShapeError):
        ens.ModeSet([dumps["test"][0], dumps["train"][0]])
    with pytest.raises(ShapeError):
        ens.ModeSet(dumps["test"][:2], modes)
    with pytest.raises(DataError):
        ens.ens_score_rankfeat(ens.ModeSet(dumps["test"][:1]))


def test_pvalues():
    cal = np.array([1.0, 2.0, 3.0, 4.0])
    assert ens.pvalues(np.array([0.5, 2.0, 10.0]), cal).tolist() == [0.0, 0.5, 1.0]
    with pytest.raises(DataError):
        ens.pvalues([1.0], [])


def test_pvalue_ensemble_takes_min():
    a = det.ScoreVector(np.array([5.0, 1.0]), "energy", ("a",))
    b = det.ScoreVector(np.array([1.0, 5.0]), "energy", ("b",))
    cal = det.ScoreVector(np.arange(10, dtype=np.float64), "energy")
    sv = ens.ens_score_pvalue([a, b], [cal, cal])
    assert np.allclose(sv.scores, [0.2, 0.2])
    assert sv.detector_id == "pvalue-energy" and sv.mode_ids == ("a", "b")
    with pytest.raises(DataError):
        ens.ens_score_pvalue([a], [cal, cal])
