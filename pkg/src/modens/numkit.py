"""Deterministic numeric substrate.

Tensors are plain numpy arrays. Storage dtype is float32; reductions are
carried out in float64 and rounded back where a result is stored.

The PRNG is SplitMix64 with Box-Muller normals. SplitMix64 is counter based
(output ``i`` depends only on ``seed + i * golden``), so whole blocks can be
drawn with vectorised uint64 arithmetic and still match the scalar stream
bit for bit.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DomainError

F32 = np.float32

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_TWO_M53 = 2.0**-53

POWER_MAX_ITER = 200
POWER_REL_TOL = 1e-9


def as_tensor(a, dtype=F32) -> np.ndarray:
    """Return ``a`` as a C-contiguous array of ``dtype`` (float32 by default)."""
    return np.ascontiguousarray(a, dtype=dtype)


def _check_vector(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise DomainError(f"expected a rank-1 tensor, got shape {z.shape}")
    if z.size == 0:
        raise DomainError("empty input")
    if not np.all(np.isfinite(z)):
        raise DomainError("non-finite input")
    return z


def _check_rows(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] == 0:
        raise DomainError(f"expected a non-empty [n, C] tensor, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise DomainError("non-finite input")
    return z


def softmax(logits) -> np.ndarray:
    z = _check_vector(logits)
    e = np.exp(z - z.max())
    return e / e.sum()


def logsumexp(logits) -> float:
    z = _check_vector(logits)
    m = z.max()
    return float(m + np.log(np.exp(z - m).sum()))


def softmax_rows(logits) -> np.ndarray:
    """Row-wise softmax of an ``[n, C]`` array, returned in float64."""
    z = _check_rows(logits)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def logsumexp_rows(logits) -> np.ndarray:
    z = _check_rows(logits)
    m = z.max(axis=1)
    return m + np.log(np.exp(z - m[:, None]).sum(axis=1))


def top_singular_triples(X) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Dominant singular triple of every matrix in a ``[n, r, c]`` stack.

    Power iteration on ``X^T X`` started from its largest-norm column. Stops
    after ``POWER_MAX_ITER`` steps or once every matrix's Rayleigh quotient
    moves by less than ``POWER_REL_TOL`` relative. All-zero matrices yield
    ``s = 0`` with ``u``, ``v`` set to the first basis vectors.

    Returns ``(s, u, v)`` with shapes ``[n]``, ``[n, r]``, ``[n, c]`` (float64).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[1] == 0 or X.shape[2] == 0:
        raise DomainError(f"expected a stack of non-empty matrices, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DomainError("non-finite input")
    n, r, c = X.shape
    G = np.einsum("nij,nik->njk", X, X)
    col_norms = np.linalg.norm(G, axis=1)
    start = np.argmax(col_norms, axis=1)
    v = G[np.arange(n), :, start]
    vnorm = np.linalg.norm(v, axis=1)
    zero = vnorm == 0.0
    v[zero] = 0.0
    v[zero, 0] = 1.0
    vnorm[zero] = 1.0
    v /= vnorm[:, None]

    lam = np.einsum("nj,njk,nk->n", v, G, v)
    active = ~zero
    for _ in range(POWER_MAX_ITER):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        w = np.einsum("njk,nk->nj", G[idx], v[idx])
        wn = np.linalg.norm(w, axis=1)
        v[idx] = w / wn[:, None]
        new = np.einsum("nj,njk,nk->n", v[idx], G[idx], v[idx])
        done = np.abs(new - lam[idx]) <= POWER_REL_TOL * np.abs(new)
        lam[idx] = new
        active[idx[done]] = False

    xv = np.einsum("nij,nj->ni", X, v)
    s = np.linalg.norm(xv, axis=1)
    u = np.zeros((n, r))
    pos = s > 0
    u[pos] = xv[pos] / s[pos, None]
    u[~pos, 0] = 1.0
    return s, u, v


def top_singular_triple(X) -> tuple[float, np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DomainError(f"expected a rank-2 tensor, got shape {X.shape}")
    s, u, v = top_singular_triples(X[None])
    return float(s[0]), u[0], v[0]


def _mix(z):
    z = (z ^ (z >> 30)) * _M1 & _MASK
    z = (z ^ (z >> 27)) * _M2 & _MASK
    return z ^ (z >> 31)


def splitmix64(x: int) -> int:
    """First SplitMix64 output from state ``x``; used to derive child seeds."""
    return _mix((x + _GOLDEN) & _MASK)


class Rng:
    """SplitMix64 generator with a Box-Muller normal stream.

    Normals are produced in pairs and both halves are consumed in order, so
    ``normal(3)`` followed by ``normal(1)`` equals ``normal(4)``.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self.state = self.seed
        self._spare: float | None = None

    def child(self, stream_index: int) -> "Rng":
        return Rng(splitmix64(self.seed ^ (int(stream_index) & _MASK)))

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK
        return _mix(self.state)

    def u64(self, n: int) -> np.ndarray:
        n = int(n)
        with np.errstate(over="ignore"):
            k = np.arange(1, n + 1, dtype=np.uint64)
            z = np.uint64(self.state) + k * np.uint64(_GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * _GOLDEN) & _MASK
        return z

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in ``[0, 1)`` from the top 53 bits of each output."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * _TWO_M53

    def _pairs(self, m: int) -> np.ndarray:
        u = self.uniform(2 * m).reshape(m, 2)
        rad = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
        ang = 2.0 * math.pi * u[:, 1]
        return np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1).ravel()

    def normal(self, shape) -> np.ndarray:
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        parts = []
        if n and self._spare is not None:
            parts.append(np.array([self._spare]))
            self._spare = None
            n -= 1
        if n:
            z = self._pairs((n + 1) // 2)
            if n % 2:
                self._spare = float(z[-1])
                z = z[:-1]
            parts.append(z)
        out = np.concatenate(parts) if parts else np.zeros(0)
        return out.reshape(shape)

    def next_gaussian(self) -> float:
        return float(self.normal(1)[0])

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.u64(n), kind="stable")


def rng_next_gaussian(rng: Rng) -> float:
    return rng.next_gaussian()
