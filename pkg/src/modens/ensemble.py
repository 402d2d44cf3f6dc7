"""Mode-ensemble versions of the detectors.

Logits-based detectors score the mean logits of the modes. Feature-based
detectors (Mahalanobis, KNN) use the mean penultimate features, for the
training bank as well as the queries. RankFeat removes the rank-1 component
per mode before averaging the changed logits; GradNorm evaluates the KL
gradient against the ensemble's softmax and averages the per-mode norms.

Means are accumulated in float64 from float32 inputs, so a single mode or a
mode duplicated N times reproduces the single-mode values exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detectors import (
    KNN_K,
    ODIN_TEMPERATURE,
    KnnIndex,
    MahalanobisStats,
    ScoreVector,
    build_knn,
    energy_from_logits,
    fit_mahalanobis,
    gradnorm_closed_form,
    knn_from_features,
    mahalanobis_from_features,
    odin_logits,
    rankfeat_logits,
)
from .errors import DataError, DomainError, ShapeError
from .model import ModeCheckpoint, OutputDump
from .numkit import softmax_rows


@dataclass
class ModeSet:
    dumps: list[OutputDump]
    ckpts: list[ModeCheckpoint] | None = None
    mode_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.dumps:
            raise DataError("a mode set needs at least one mode")
        ref = self.dumps[0]
        for d in self.dumps[1:]:
            if d.logits.shape != ref.logits.shape or d.penultimate.shape != ref.penultimate.shape:
                raise ShapeError("dumps in a mode set must share n, C and h")
        if self.ckpts is not None and len(self.ckpts) != len(self.dumps):
            raise ShapeError("checkpoint count does not match dump count")
        if not self.mode_ids:
            self.mode_ids = tuple(d.mode_id for d in self.dumps)

    @property
    def dataset_id(self) -> str:
        return self.dumps[0].dataset_id

    def require_ckpts(self) -> list[ModeCheckpoint]:
        if self.ckpts is None:
            raise DataError("this detector needs the mode checkpoints")
        return self.ckpts


def _sv(scores, detector_id, ms: ModeSet) -> ScoreVector:
    return ScoreVector(scores, detector_id, ms.mode_ids, ms.dataset_id)


def _mean(arrays) -> np.ndarray:
    return np.mean(np.stack([np.asarray(a, dtype=np.float64) for a in arrays]), axis=0)


def ens_logits(ms: ModeSet) -> np.ndarray:
    return _mean(d.logits for d in ms.dumps)


def ens_features(ms: ModeSet) -> np.ndarray:
    return _mean(d.penultimate for d in ms.dumps)


def ens_score_msp(ms: ModeSet) -> ScoreVector:
    return _sv(softmax_rows(ens_logits(ms)).max(axis=1), "msp", ms)


def ens_score_energy(ms: ModeSet) -> ScoreVector:
    return _sv(energy_from_logits(ens_logits(ms)), "energy", ms)


def ens_score_odin(ms: ModeSet, T: float = ODIN_TEMPERATURE, eps: float = 0.0, x=None) -> ScoreVector:
    """Mean of per-mode (optionally perturbed) logits, then tempered MSP."""
    if not T > 0:
        raise DomainError("temperature must be positive")
    if eps == 0.0:
        z = ens_logits(ms)
    else:
        ckpts = ms.ckpts if ms.ckpts is not None else [None] * len(ms.dumps)
        z = _mean(odin_logits(d, eps, T, c, x) for d, c in zip(ms.dumps, ckpts))
    return _sv(softmax_rows(z / T).max(axis=1), "odin", ms)


def ens_fit_mahalanobis(train_ms: ModeSet, labels, **kwargs) -> MahalanobisStats:
    return fit_mahalanobis(ens_features(train_ms), labels, **kwargs)


def ens_score_mahalanobis(stats: MahalanobisStats, ms: ModeSet) -> ScoreVector:
    return _sv(mahalanobis_from_features(stats, ens_features(ms)), "mahalanobis", ms)


def ens_build_knn(train_ms: ModeSet, k: int = KNN_K) -> KnnIndex:
    return build_knn(ens_features(train_ms), k)


def ens_score_knn(ms: ModeSet, index: KnnIndex) -> ScoreVector:
    return _sv(knn_from_features(index, ens_features(ms)), "knn", ms)


def ens_score_rankfeat(ms: ModeSet) -> ScoreVector:
    z = _mean(rankfeat_logits(d, c) for d, c in zip(ms.dumps, ms.require_ckpts()))
    return _sv(energy_from_logits(z), "rankfeat", ms)


def ens_score_gradnorm(ms: ModeSet) -> ScoreVector:
    z = ens_logits(ms)
    per_mode = [gradnorm_closed_form(z, d.penultimate) for d in ms.dumps]
    return _sv(_mean(per_mode), "gradnorm", ms)


def pvalues(scores, calibration) -> np.ndarray:
    """Fraction of calibration scores that are <= each score."""
    cal = np.sort(np.asarray(getattr(calibration, "scores", calibration), dtype=np.float64))
    if cal.size == 0:
        raise DataError("empty calibration set")
    s = np.asarray(getattr(scores, "scores", scores), dtype=np.float64)
    return np.searchsorted(cal, s, side="right") / cal.size


def ens_score_pvalue(per_mode_scores: list[ScoreVector], ind_calibration: list[ScoreVector]) -> ScoreVector:
    """Min over modes of each mode's empirical InD p-value.

    A stand-in for p-value based ensembling: high p means InD-like, and the
    minimum flags a sample as soon as any one mode finds it atypical.
    """
    if not per_mode_scores or len(per_mode_scores) != len(ind_calibration):
        raise DataError("need one calibration set per mode")
    p = np.min(np.stack([pvalues(s, c) for s, c in zip(per_mode_scores, ind_calibration)]), axis=0)
    ids = tuple(m for s in per_mode_scores for m in s.mode_ids)
    det = per_mode_scores[0].detector_id
    return ScoreVector(p, f"pvalue-{det}" if det else "pvalue", ids, per_mode_scores[0].dataset_id)
