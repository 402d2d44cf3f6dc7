"""Single-mode post-hoc OoD scores. Higher always means more in-distribution.

Scores are computed in float64 and stored as float32, so results that agree
to float64 rounding (e.g. a KNN query scaled by a constant before
normalization) come out bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DomainError, NumericError, ShapeError, UnsupportedPerturbation
from .model import ModeCheckpoint, OutputDump, forward, grad_input_nll_batch, head
from .numkit import as_tensor, logsumexp_rows, softmax_rows, top_singular_triples

ODIN_TEMPERATURE = 1000.0
KNN_K = 5
MAHALANOBIS_REL_EPS = 1e-6
MAHALANOBIS_ABS_EPS = 1e-6


@dataclass
class ScoreVector:
    scores: np.ndarray
    detector_id: str
    mode_ids: tuple[str, ...] = ()
    dataset_id: str = ""

    def __post_init__(self):
        self.scores = as_tensor(self.scores)
        self.mode_ids = tuple(self.mode_ids)
        if self.scores.ndim != 1:
            raise ShapeError("scores must be rank-1")
        if not np.all(np.isfinite(self.scores)):
            raise NumericError(f"{self.detector_id}: non-finite scores")

    def __len__(self):
        return self.scores.shape[0]


def _sv(scores, detector_id, dumps):
    dumps = dumps if isinstance(dumps, (list, tuple)) else [dumps]
    return ScoreVector(scores, detector_id, [d.mode_id for d in dumps], dumps[0].dataset_id)


def _logits(dump_or_logits) -> np.ndarray:
    z = dump_or_logits.logits if isinstance(dump_or_logits, OutputDump) else dump_or_logits
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] < 2:
        raise DomainError(f"logits must be [n, C] with C >= 2, got {z.shape}")
    return z


# ---------------------------------------------------------------- logits family


def msp_from_logits(z) -> np.ndarray:
    return softmax_rows(_logits(z)).max(axis=1)


def energy_from_logits(z) -> np.ndarray:
    return logsumexp_rows(_logits(z))


def score_msp(dump) -> ScoreVector:
    """Maximum softmax probability. Accepts an ``OutputDump`` or raw logits."""
    s = msp_from_logits(dump)
    if isinstance(dump, OutputDump):
        return _sv(s, "msp", dump)
    return ScoreVector(s, "msp")


def score_energy(dump) -> ScoreVector:
    s = energy_from_logits(dump)
    if isinstance(dump, OutputDump):
        return _sv(s, "energy", dump)
    return ScoreVector(s, "energy")


def perturb_inputs(ckpt: ModeCheckpoint, x, eps: float, temperature: float) -> np.ndarray:
    """ODIN input preprocessing: step against the sign of the NLL gradient."""
    g = grad_input_nll_batch(ckpt, x, temperature=temperature)
    return np.asarray(x, dtype=np.float64) - eps * np.sign(g)


def odin_logits(dump: OutputDump, eps: float, temperature: float, ckpt=None, x=None) -> np.ndarray:
    if eps == 0.0:
        return _logits(dump)
    if ckpt is None or x is None:
        raise UnsupportedPerturbation("ODIN with eps > 0 needs the checkpoint and the raw inputs")
    xp = perturb_inputs(ckpt, x, eps, temperature)
    return forward(ckpt, xp, dump.dataset_id).logits.astype(np.float64)


def score_odin(
    dump: OutputDump,
    T: float = ODIN_TEMPERATURE,
    eps: float = 0.0,
    ckpt: ModeCheckpoint | None = None,
    x=None,
) -> ScoreVector:
    if not T > 0:
        raise DomainError("temperature must be positive")
    z = odin_logits(dump, eps, T, ckpt, x)
    return _sv(softmax_rows(z / T).max(axis=1), "odin", dump)


# ---------------------------------------------------------------- Mahalanobis


@dataclass(frozen=True)
class MahalanobisStats:
    class_means: np.ndarray
    precision: np.ndarray
    eps: float
    covariance: np.ndarray = field(repr=False, default=None)


def fit_mahalanobis(train_features, labels, rel_eps: float = MAHALANOBIS_REL_EPS) -> MahalanobisStats:
    """Class means and the inverse of the pooled within-class covariance.

    The covariance gets ``eps * I`` added with ``eps = rel_eps * trace / h``,
    falling back to ``MAHALANOBIS_ABS_EPS`` when the trace is zero.
    """
    h = np.asarray(train_features, dtype=np.float64)
    labels = np.asarray(labels)
    if h.ndim != 2 or h.shape[0] != labels.shape[0]:
        raise ShapeError("features and labels disagree")
    classes = np.unique(labels)
    means = np.zeros((int(classes.max()) + 1, h.shape[1]))
    centered = np.empty_like(h)
    for c in classes:
        mask = labels == c
        if mask.sum() < 2:
            raise DataError(f"class {int(c)} has fewer than 2 samples")
        means[c] = h[mask].mean(axis=0)
        centered[mask] = h[mask] - means[c]
    if len(classes) != means.shape[0]:
        raise DataError("class labels are not contiguous from 0")
    cov = centered.T @ centered / h.shape[0]
    cov = 0.5 * (cov + cov.T)
    tr = float(np.trace(cov))
    eps = rel_eps * tr / h.shape[1] if tr > 0 else MAHALANOBIS_ABS_EPS
    cov = cov + eps * np.eye(h.shape[1])
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"covariance not positive definite after regularization: {exc}") from exc
    Linv = np.linalg.solve(L, np.eye(h.shape[1]))
    precision = Linv.T @ Linv
    precision = 0.5 * (precision + precision.T)
    return MahalanobisStats(as_tensor(means), precision, eps, cov)


def mahalanobis_from_features(stats: MahalanobisStats, features) -> np.ndarray:
    h = np.asarray(features, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != stats.precision.shape[0]:
        raise ShapeError("feature width does not match the fitted statistics")
    best = np.full(h.shape[0], -np.inf)
    for mu in stats.class_means.astype(np.float64):
        d = h - mu
        q = np.einsum("ni,ij,nj->n", d, stats.precision, d)
        best = np.maximum(best, -q)
    return np.minimum(best, 0.0)


def score_mahalanobis(stats: MahalanobisStats, features) -> ScoreVector:
    if isinstance(features, OutputDump):
        return _sv(mahalanobis_from_features(stats, features.penultimate), "mahalanobis", features)
    return ScoreVector(mahalanobis_from_features(stats, features), "mahalanobis")


# ---------------------------------------------------------------- KNN


def l2_normalize(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    norms = np.linalg.norm(h, axis=1, keepdims=True)
    return h / np.where(norms > 0, norms, 1.0)


@dataclass(frozen=True)
class KnnIndex:
    bank: np.ndarray
    k: int = KNN_K


def build_knn(train_features, k: int = KNN_K) -> KnnIndex:
    bank = l2_normalize(train_features)
    if bank.shape[0] == 0:
        raise DataError("empty KNN bank")
    if not 1 <= k <= bank.shape[0]:
        raise DataError(f"k={k} outside 1..{bank.shape[0]}")
    return KnnIndex(bank, int(k))


def knn_from_features(index: KnnIndex, features, chunk: int = 1024) -> np.ndarray:
    if index.bank.shape[0] == 0:
        raise DataError("empty KNN bank")
    q = l2_normalize(features)
    bank_sq = (index.bank**2).sum(axis=1)
    out = np.empty(q.shape[0])
    for s in range(0, q.shape[0], chunk):
        qb = q[s : s + chunk]
        d2 = (qb**2).sum(axis=1)[:, None] + bank_sq[None, :] - 2.0 * qb @ index.bank.T
        kth = np.partition(d2, index.k - 1, axis=1)[:, index.k - 1]
        out[s : s + chunk] = -np.sqrt(np.maximum(kth, 0.0))
    return out


def score_knn(index: KnnIndex, features) -> ScoreVector:
    if isinstance(features, OutputDump):
        return _sv(knn_from_features(index, features.penultimate), "knn", features)
    return ScoreVector(knn_from_features(index, features), "knn")


# ---------------------------------------------------------------- RankFeat


def rankfeat_logits(dump: OutputDump, ckpt: ModeCheckpoint) -> np.ndarray:
    """Logits after subtracting each sample's dominant rank-1 feature component."""
    X = np.asarray(dump.feature_matrix, dtype=np.float64)
    if X.ndim != 3 or X.shape[1:] != ckpt.arch.feature_matrix_shape:
        raise ShapeError("feature matrix does not match the checkpoint's tap point")
    s, u, v = top_singular_triples(X)
    Xp = X - s[:, None, None] * u[:, :, None] * v[:, None, :]
    return head(ckpt, Xp.reshape(X.shape[0], -1))


def score_rankfeat(dump: OutputDump, ckpt: ModeCheckpoint) -> ScoreVector:
    return _sv(logsumexp_rows(rankfeat_logits(dump, ckpt)), "rankfeat", dump)


# ---------------------------------------------------------------- GradNorm


def gradnorm_closed_form(logits, features) -> np.ndarray:
    p = softmax_rows(_logits(logits))
    h = np.asarray(features, dtype=np.float64)
    return np.abs(p - 1.0 / p.shape[1]).sum(axis=1) * np.abs(h).sum(axis=1)


def score_gradnorm(dump: OutputDump, ckpt: ModeCheckpoint | None = None) -> ScoreVector:
    """``|p - u|_1 * |h|_1``; equals the l1 norm of dKL/dW_last. ``ckpt`` is unused."""
    return _sv(gradnorm_closed_form(dump.logits, dump.penultimate), "gradnorm", dump)


DETECTORS = ("msp", "odin", "energy", "mahalanobis", "knn", "rankfeat", "gradnorm")
