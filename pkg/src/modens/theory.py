"""Probit accuracy gap of linear modes under a Gaussian shift.

InD: ``x ~ N(mu * y, sigma^2 I)`` with ``y`` in {-1, +1}; OoD replaces the
mean by ``alpha*mu + beta*delta`` and the std by ``gamma*sigma``. A linear
mode ``sign(theta^T x)`` then has accuracy ``Phi(theta^T m / (|theta| s))``
on a Gaussian with mean ``m`` and std ``s``, and the gap

    G(theta) = |Phi^-1(ACC_out) - (alpha/gamma) Phi^-1(ACC_in)|

reduces to ``beta/(gamma*sigma) * |theta^T delta| / |theta|``. The ensemble
``sign(sum_i theta_i^T x)`` is the linear mode with ``theta = sum_i theta_i``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .data import GaussianSpec, sample_ind
from .errors import DataError, DomainError, NumericError
from .numkit import Rng

_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425

CROSS_CHECK_TOL = 1e-6
CROSS_CHECK_RANGE = (1e-3, 1.0 - 1e-3)


def norm_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def _poly(coeffs, x):
    acc = 0.0
    for c in coeffs:
        acc = acc * x + c
    return acc


def norm_ppf(p: float) -> float:
    """Inverse standard normal CDF: rational approximation plus one Halley step."""
    if not 0.0 < p < 1.0:
        raise DomainError(f"probit undefined at p={p}")
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = _poly(_C, q) / (_poly(_D, q) * q + 1.0)
    elif p <= 1.0 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = _poly(_A, r) * q / (_poly(_B, r) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log1p(-p))
        x = -_poly(_C, q) / (_poly(_D, q) * q + 1.0)
    # Halley refinement against erfc; residual taken on the smaller tail
    if p < 0.5:
        e = norm_cdf(x) - p
    else:
        e = (1.0 - p) - 0.5 * math.erfc(x / math.sqrt(2.0))
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


@dataclass
class LinearMode:
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.ndim != 1 or not np.linalg.norm(self.theta) > 0:
            raise DomainError("theta must be a non-zero rank-1 tensor")

    def predict(self, x) -> np.ndarray:
        return np.sign(np.asarray(x, dtype=np.float64) @ self.theta)


def _theta(t) -> np.ndarray:
    return t.theta if isinstance(t, LinearMode) else LinearMode(t).theta


def acc_closed_form(theta, mean_vec, sigma: float) -> float:
    th = _theta(theta)
    if not sigma > 0:
        raise DomainError("sigma must be positive")
    t = float(th @ np.asarray(mean_vec, dtype=np.float64)) / (np.linalg.norm(th) * sigma)
    return norm_cdf(t)


def ens_linear(thetas) -> LinearMode:
    ths = [_theta(t) for t in thetas]
    if not ths:
        raise DataError("need at least one classifier")
    total = np.sum(ths, axis=0)
    scale = max(np.linalg.norm(t) for t in ths)
    if np.linalg.norm(total) <= 1e-12 * scale:
        raise DomainError("ensemble weights cancel to zero")
    return LinearMode(total)


def accuracies(theta, spec: GaussianSpec) -> tuple[float, float]:
    return (
        acc_closed_form(theta, spec.mu, spec.sigma),
        acc_closed_form(theta, spec.mu_out, spec.sigma_out),
    )


def gap_reduced(theta, spec: GaussianSpec) -> float:
    th = _theta(theta)
    return spec.beta / (spec.gamma * spec.sigma) * abs(float(th @ spec.delta)) / np.linalg.norm(th)


def gap(theta, spec: GaussianSpec) -> float:
    """Probit accuracy gap, cross-checked against its reduced closed form."""
    acc_in, acc_out = accuracies(theta, spec)
    for name, a in (("InD", acc_in), ("OoD", acc_out)):
        if not 0.0 < a < 1.0:
            raise DomainError(
                f"{name} accuracy is {a}; probit is infinite. Shrink |mu|/sigma or the shift."
            )
    g = abs(norm_ppf(acc_out) - spec.alpha / spec.gamma * norm_ppf(acc_in))
    lo, hi = CROSS_CHECK_RANGE
    if lo < acc_in < hi and lo < acc_out < hi:
        ref = gap_reduced(theta, spec)
        if abs(g - ref) > CROSS_CHECK_TOL * max(1.0, ref):
            raise NumericError(f"probit gap {g} disagrees with reduced form {ref}")
    return g


@dataclass
class GapResult:
    gap_each: list[float]
    gap_avg: float
    gap_ens: float
    acc_in: list[float]
    acc_out: list[float]
    acc_in_ens: float
    acc_out_ens: float
    holds: bool
    ratio: float
    reduced_ratio: float

    def to_json(self) -> dict:
        return asdict(self)


def _cos(a, b) -> float:
    nb = np.linalg.norm(b)
    return float(a @ b) / (np.linalg.norm(a) * nb) if nb > 0 else 0.0


def proposition_check(thetas, spec: GaussianSpec) -> GapResult:
    """Compare the ensemble's gap with the mean single-mode gap.

    ``ratio`` is ``gap_avg / gap_ens`` computed exactly. ``reduced_ratio`` is
    ``sum|cos_i| / |sum cos_i|`` (cosines against ``delta``), the value the
    ratio takes once all norms are equal and all pairwise angles are zero.
    """
    ths = [_theta(t) for t in thetas]
    if len(ths) < 2:
        raise DataError("need at least two classifiers")
    ens = ens_linear(ths)
    each = [gap(t, spec) for t in ths]
    accs = [accuracies(t, spec) for t in ths]
    g_ens = gap(ens, spec)
    ai, ao = accuracies(ens, spec)
    g_avg = float(np.mean(each))
    if g_ens > 0:
        ratio = g_avg / g_ens
    else:
        ratio = 1.0 if g_avg == 0 else math.inf
    cos = [_cos(t, spec.delta) for t in ths]
    denom = abs(sum(cos))
    reduced = sum(abs(c) for c in cos) / denom if denom > 0 else math.inf
    return GapResult(
        each, g_avg, g_ens, [a for a, _ in accs], [b for _, b in accs], ai, ao,
        bool(g_ens <= g_avg), ratio, reduced,
    )


# ---------------------------------------------------------------- sweeps


def _unit(v):
    return v / np.linalg.norm(v)


def regime_thetas(rng: Rng, axis, n: int, max_angle_deg: float = 5.0, norm_spread: float = 0.01) -> list[np.ndarray]:
    """Weights with norms in ``[1, 1 + norm_spread]`` and pairwise angle <= ``max_angle_deg``.

    Each theta is tilted from ``axis`` by at most half the angle budget.
    """
    axis = _unit(np.asarray(axis, dtype=np.float64))
    half = math.radians(max_angle_deg) / 2.0
    out = []
    for _ in range(n):
        p = rng.normal(axis.size)
        p = _unit(p - (p @ axis) * axis)
        phi = half * rng.uniform(1)[0]
        norm = 1.0 + norm_spread * rng.uniform(1)[0]
        out.append(norm * (math.cos(phi) * axis + math.sin(phi) * p))
    return out


def fit_logistic(ds, iters: int = 200, lr: float = 0.5) -> np.ndarray:
    """Bias-free logistic regression by full-batch gradient descent from zero."""
    x = ds.x.astype(np.float64)
    s = ds.signed_labels().astype(np.float64)
    theta = np.zeros(x.shape[1])
    for _ in range(iters):
        m = s * (x @ theta)
        w = 0.5 * (1.0 - np.tanh(0.5 * m))  # sigmoid(-m), overflow free
        theta += lr * (s * w) @ x / x.shape[0]
    return theta


def learned_thetas(spec: GaussianSpec, n_modes: int, n_samples: int, rng: Rng) -> list[np.ndarray]:
    """One logistic-regression fit per seed-specific finite InD sample."""
    return [fit_logistic(sample_ind(spec, n_samples, rng.child(i))) for i in range(n_modes)]


DEFAULT_SWEEP = {
    "trials": 1000,
    "seed": 0,
    "dim": 10,
    "n_modes": 5,
    "mu_norm": 1.5,
    "sigma": 1.0,
    "max_angle_deg": 5.0,
    "norm_spread": 0.01,
    "generator": "regime",
    "n_samples": 200,
}


def random_spec(rng: Rng, dim: int, mu_norm: float, sigma: float) -> GaussianSpec:
    mu = mu_norm * _unit(rng.normal(dim))
    delta = rng.normal(dim)
    alpha, beta, gamma = 0.5 + rng.uniform(1)[0], 0.1 + 0.9 * rng.uniform(1)[0], 0.5 + 1.5 * rng.uniform(1)[0]
    return GaussianSpec(mu, sigma, alpha, beta, gamma, delta)


def sweep(config: dict | None = None) -> dict:
    """Seeded trials of ``proposition_check``; returns a JSON-ready report."""
    cfg = {**DEFAULT_SWEEP, **(config or {})}
    root = Rng(int(cfg["seed"]))
    trials = []
    for t in range(int(cfg["trials"])):
        rng = root.child(t)
        spec = random_spec(rng, int(cfg["dim"]), float(cfg["mu_norm"]), float(cfg["sigma"]))
        if cfg["generator"] == "regime":
            ths = regime_thetas(rng, spec.mu, int(cfg["n_modes"]), cfg["max_angle_deg"], cfg["norm_spread"])
        elif cfg["generator"] == "learned":
            ths = learned_thetas(spec, int(cfg["n_modes"]), int(cfg["n_samples"]), rng)
        else:
            raise DataError(f"unknown theta generator {cfg['generator']!r}")
        res = proposition_check(ths, spec)
        trials.append({
            "trial": t,
            "gap_avg": res.gap_avg,
            "gap_ens": res.gap_ens,
            "ratio": res.ratio,
            "reduced_ratio": res.reduced_ratio,
            "holds": res.holds,
        })
    ratios = np.array([r["ratio"] for r in trials])
    finite = ratios[np.isfinite(ratios)]
    counts, edges = np.histogram(finite, bins=10) if finite.size else (np.zeros(0), np.zeros(0))
    return {
        "config": cfg,
        "n_trials": len(trials),
        "n_holds": int(sum(r["holds"] for r in trials)),
        "n_reduced_ge_1": int(sum(r["reduced_ratio"] >= 1.0 for r in trials)),
        "ratio_summary": {
            "min": float(finite.min()) if finite.size else None,
            "median": float(np.median(finite)) if finite.size else None,
            "max": float(finite.max()) if finite.size else None,
            "histogram": {"counts": counts.astype(int).tolist(), "edges": edges.tolist()},
        },
        "trials": trials,
    }
