"""Fully connected ReLU networks trained per seed ("modes").

Weights are stored as float32 ``(W, b)`` pairs with ``W`` shaped
``[fan_in, fan_out]`` so a layer computes ``a @ W + b``. Inference runs in
float64 through ``np.einsum``, whose per-row summation order does not depend
on batch size; a single row therefore reproduces its batched result exactly.
Training uses BLAS matmuls for speed.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import LabeledDataset, atomic_write_bytes
from .errors import BadMagic, DataError, ShapeError, TrainingDivergence, Truncated, VersionMismatch
from .numkit import Rng, as_tensor, softmax_rows

CKPT_MAGIC = b"MCKP"
CKPT_VERSION = 1

DEFAULT_TRAINING = {"epochs": 100, "lr": 0.05, "batch_size": 64}


@dataclass(frozen=True)
class MlpArch:
    layer_widths: tuple[int, ...]
    feature_matrix_shape: tuple[int, int]

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        fm = tuple(int(v) for v in self.feature_matrix_shape)
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "feature_matrix_shape", fm)
        if len(widths) < 3 or min(widths) < 1:
            raise ShapeError(f"need at least one hidden layer, got widths {widths}")
        if len(fm) != 2 or fm[0] * fm[1] != widths[-2]:
            raise ShapeError(f"feature matrix {fm} does not factorize penultimate width {widths[-2]}")

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def num_classes(self) -> int:
        return self.layer_widths[-1]

    @property
    def feature_dim(self) -> int:
        return self.layer_widths[-2]

    def layer_shapes(self) -> list[tuple[tuple[int, int], tuple[int]]]:
        w = self.layer_widths
        return [((w[i], w[i + 1]), (w[i + 1],)) for i in range(len(w) - 1)]

    def to_json(self) -> dict:
        return {"layer_widths": list(self.layer_widths), "feature_matrix_shape": list(self.feature_matrix_shape)}

    @classmethod
    def from_json(cls, doc: dict) -> "MlpArch":
        return cls(tuple(doc["layer_widths"]), tuple(doc["feature_matrix_shape"]))


def default_arch(input_dim: int = 2, num_classes: int = 4) -> MlpArch:
    return MlpArch((input_dim, 64, 64, num_classes), (8, 8))


@dataclass
class ModeCheckpoint:
    arch: MlpArch
    weights: list[tuple[np.ndarray, np.ndarray]]
    seed: int
    train_meta: dict = field(default_factory=dict)
    mode_id: str = ""

    def __post_init__(self):
        self.weights = [(as_tensor(W), as_tensor(b)) for W, b in self.weights]
        shapes = self.arch.layer_shapes()
        if len(shapes) != len(self.weights):
            raise ShapeError("layer count does not match architecture")
        for (ws, bs), (W, b) in zip(shapes, self.weights):
            if W.shape != ws or b.shape != bs:
                raise ShapeError(f"weight shapes {W.shape}/{b.shape} do not match {ws}/{bs}")
        if not self.mode_id:
            self.mode_id = f"seed{self.seed}"

    def flat_params(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.weights]).astype(np.float64)

    def with_params(self, flat, **changes) -> "ModeCheckpoint":
        flat = np.asarray(flat)
        weights, pos = [], 0
        for ws, bs in self.arch.layer_shapes():
            nw = ws[0] * ws[1]
            W = flat[pos : pos + nw].reshape(ws)
            b = flat[pos + nw : pos + nw + bs[0]]
            pos += nw + bs[0]
            weights.append((W, b))
        if pos != flat.size:
            raise ShapeError(f"parameter vector has {flat.size} entries, expected {pos}")
        return replace(self, weights=weights, **changes)

    def equals(self, other: "ModeCheckpoint") -> bool:
        return self.arch == other.arch and all(
            np.array_equal(W1, W2) and np.array_equal(b1, b2)
            for (W1, b1), (W2, b2) in zip(self.weights, other.weights)
        )


@dataclass
class OutputDump:
    logits: np.ndarray
    penultimate: np.ndarray
    feature_matrix: np.ndarray
    mode_id: str = ""
    dataset_id: str = ""

    @property
    def n(self) -> int:
        return self.logits.shape[0]


# ---------------------------------------------------------------- passes


def _einsum_mm(a, W):
    return np.einsum("ni,ij->nj", a, W)


def _blas_mm(a, W):
    return a @ W


def _forward_cache(weights, x, mm):
    """Return the list of post-activation inputs per layer and the logits."""
    acts = [x]
    a = x
    for W, b in weights[:-1]:
        a = np.maximum(mm(a, W) + b, 0.0)
        acts.append(a)
    W, b = weights[-1]
    return acts, mm(a, W) + b


def _backward(weights, acts, dlogits, mm=_blas_mm):
    """Gradients of a loss with ``dL/dlogits = dlogits`` for all layers and the input."""
    grads = [None] * len(weights)
    delta = dlogits
    for i in range(len(weights) - 1, -1, -1):
        W, _ = weights[i]
        grads[i] = (mm(acts[i].T, delta), delta.sum(axis=0))
        delta = mm(delta, W.T)
        if i > 0:
            delta = delta * (acts[i] > 0.0)
    return grads, delta


def _f64(weights):
    return [(W.astype(np.float64), b.astype(np.float64)) for W, b in weights]


def _check_input(ckpt: ModeCheckpoint, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != ckpt.arch.input_dim:
        raise ShapeError(f"input shape {x.shape} does not match input dim {ckpt.arch.input_dim}")
    return x


def forward(ckpt: ModeCheckpoint, x, dataset_id: str = "") -> OutputDump:
    x = _check_input(ckpt, x)
    acts, logits = _forward_cache(_f64(ckpt.weights), x, _einsum_mm)
    pen = as_tensor(acts[-1])
    r, c = ckpt.arch.feature_matrix_shape
    return OutputDump(as_tensor(logits), pen, pen.reshape(-1, r, c), ckpt.mode_id, dataset_id)


def head(ckpt: ModeCheckpoint, features) -> np.ndarray:
    """Apply the final linear layer to penultimate features (float64 result)."""
    W, b = ckpt.weights[-1]
    h = np.asarray(features, dtype=np.float64)
    return _einsum_mm(h, W.astype(np.float64)) + b.astype(np.float64)


def cross_entropy(logits, labels) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    return lse - z[np.arange(z.shape[0]), labels]


def _fast_logits(ckpt: ModeCheckpoint, x) -> np.ndarray:
    return _forward_cache(_f64(ckpt.weights), _check_input(ckpt, x), _blas_mm)[1]


def mean_loss(ckpt: ModeCheckpoint, ds: LabeledDataset) -> float:
    """Mean cross-entropy on ``ds`` (BLAS path, not batch-size exact)."""
    return float(cross_entropy(_fast_logits(ckpt, ds.x), ds.y).mean())


def accuracy(ckpt: ModeCheckpoint, ds: LabeledDataset) -> float:
    return float((np.argmax(_fast_logits(ckpt, ds.x), axis=1) == ds.y).mean())


# ---------------------------------------------------------------- training


def init_weights(arch: MlpArch, rng: Rng) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for (fan_in, fan_out), _ in arch.layer_shapes():
        W = rng.normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in)
        out.append((W, np.zeros(fan_out)))
    return out


def _finite_f32(weights) -> bool:
    with np.errstate(over="ignore"):
        return all(np.all(np.isfinite(W.astype(np.float32))) and np.all(np.isfinite(b.astype(np.float32)))
                   for W, b in weights)


def train_trajectory(
    arch: MlpArch,
    train: LabeledDataset,
    seed: int,
    test: LabeledDataset | None = None,
    epochs: int = 100,
    lr: float = 0.05,
    batch_size: int = 64,
    snapshot_every: int | None = None,
) -> tuple[ModeCheckpoint, list[ModeCheckpoint]]:
    """Train one mode; optionally keep a checkpoint every ``snapshot_every`` epochs.

    Initialization and the per-epoch shuffles both come from ``Rng(seed)``.
    Plain minibatch SGD on mean cross-entropy, learning rate cosine-decayed
    per step from ``lr`` to 0.
    """
    if train.y.size and train.y.max() >= arch.num_classes:
        raise DataError("labels exceed the architecture's class count")
    if train.x.shape[1] != arch.input_dim:
        raise ShapeError("training inputs do not match the architecture")
    if snapshot_every is not None and not 1 <= snapshot_every <= epochs:
        raise DataError(f"snapshot stride {snapshot_every} outside 1..{epochs}")
    rng = Rng(seed)
    weights = init_weights(arch, rng)
    x = train.x.astype(np.float64)
    y = train.y
    n = x.shape[0]
    steps_per_epoch = -(-n // batch_size)
    total = epochs * steps_per_epoch
    step = 0
    snaps = []

    def freeze(meta):
        return ModeCheckpoint(arch, [(W.astype(np.float32), b.astype(np.float32)) for W, b in weights], seed, meta)

    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb, yb = x[idx], y[idx]
            acts, logits = _forward_cache(weights, xb, _blas_mm)
            p = softmax_rows(logits) if np.all(np.isfinite(logits)) else None
            if p is None:
                raise TrainingDivergence(epoch, float("nan"))
            loss = cross_entropy(logits, yb).sum()
            if not math.isfinite(loss):
                raise TrainingDivergence(epoch, loss)
            epoch_loss += loss
            p[np.arange(len(idx)), yb] -= 1.0
            grads, _ = _backward(weights, acts, p / len(idx))
            step_lr = lr * 0.5 * (1.0 + math.cos(math.pi * step / total))
            weights = [(W - step_lr * gW, b - step_lr * gb) for (W, b), (gW, gb) in zip(weights, grads)]
            step += 1
        if not math.isfinite(epoch_loss) or not _finite_f32(weights):
            raise TrainingDivergence(epoch, epoch_loss)
        if snapshot_every and (epoch + 1) % snapshot_every == 0:
            snaps.append(freeze({"epoch": epoch + 1}))

    meta = {"epochs": epochs, "lr": lr, "lr_schedule": "cosine", "batch_size": batch_size}
    ckpt = freeze(meta)
    ckpt.train_meta["final_train_loss"] = mean_loss(ckpt, train)
    ckpt.train_meta["final_test_accuracy"] = accuracy(ckpt, test) if test is not None else None
    return ckpt, snaps


def train_mode(arch, train, seed, test=None, **kwargs) -> ModeCheckpoint:
    return train_trajectory(arch, train, seed, test, **kwargs)[0]


# ---------------------------------------------------------------- gradients


def grad_input_nll_batch(ckpt: ModeCheckpoint, x, labels=None, temperature: float = 1.0) -> np.ndarray:
    """d/dx of cross-entropy of ``softmax(f(x)/T)`` at ``labels`` (argmax if None)."""
    x = _check_input(ckpt, x)
    weights = _f64(ckpt.weights)
    acts, logits = _forward_cache(weights, x, _blas_mm)
    p = softmax_rows(logits / temperature)
    if labels is None:
        labels = np.argmax(logits, axis=1)
    p[np.arange(x.shape[0]), labels] -= 1.0
    _, dx = _backward(weights, acts, p / temperature)
    return dx


def grad_input_nll(ckpt: ModeCheckpoint, x, label=None, temperature: float = 1.0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    labels = None if label is None else np.array([label])
    return grad_input_nll_batch(ckpt, x[None, :], labels, temperature)[0]


def grad_lastfc_kl(ckpt: ModeCheckpoint, x) -> float:
    """l1 norm of dKL(u || softmax(f(x)))/dW_last, closed form ``|p - u|_1 * |h|_1``."""
    d = forward(ckpt, np.asarray(x, dtype=np.float64)[None, :])
    p = softmax_rows(d.logits)[0]
    u = 1.0 / p.size
    return float(np.abs(p - u).sum() * np.abs(d.penultimate[0].astype(np.float64)).sum())


def grad_lastfc_kl_backprop(ckpt: ModeCheckpoint, x) -> np.ndarray:
    """Full gradient of the KL loss w.r.t. the last weight matrix, via backprop."""
    weights = _f64(ckpt.weights)
    acts, logits = _forward_cache(weights, np.asarray(x, dtype=np.float64)[None, :], _einsum_mm)
    p = softmax_rows(logits)
    grads, _ = _backward(weights, acts, p - 1.0 / p.shape[1])
    return grads[-1][0]


# ---------------------------------------------------------------- subspace modes


def sample_subspace_modes(ckpt: ModeCheckpoint, M: int, r_max: float, rng: Rng) -> list[ModeCheckpoint]:
    """Dependent modes ``w + r * u / |u|`` around ``ckpt`` with ``r ~ U(0, r_max]``."""
    if M < 1 or not r_max > 0:
        raise DataError("need M >= 1 and r_max > 0")
    base = ckpt.flat_params()
    out = []
    for i in range(M):
        u = rng.normal(base.size)
        r = r_max * (1.0 - rng.uniform(1)[0])
        flat = base + r * u / np.linalg.norm(u)
        meta = {"subspace_of": ckpt.mode_id, "step": float(r)}
        out.append(ckpt.with_params(flat, train_meta=meta, mode_id=f"{ckpt.mode_id}-sub{i}"))
    return out


# ---------------------------------------------------------------- checkpoint file


def encode_ckpt(ckpt: ModeCheckpoint) -> bytes:
    header = {
        "arch": ckpt.arch.to_json(),
        "seed": ckpt.seed,
        "mode_id": ckpt.mode_id,
        "train_meta": ckpt.train_meta,
        "layers": [{"name": f"fc{i}", "W": list(W.shape), "b": list(b.shape)} for i, (W, b) in enumerate(ckpt.weights)],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(hbytes)), hbytes]
    for W, b in ckpt.weights:
        parts.append(np.ascontiguousarray(W, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_ckpt(buf: bytes) -> ModeCheckpoint:
    if len(buf) < 10:
        raise Truncated("checkpoint header truncated")
    if buf[:4] != CKPT_MAGIC:
        raise BadMagic(f"bad checkpoint magic {bytes(buf[:4])!r}")
    version, hlen = struct.unpack_from("<HI", buf, 4)
    if version != CKPT_VERSION:
        raise VersionMismatch(f"unsupported checkpoint version {version}")
    if len(buf) < 10 + hlen:
        raise Truncated("checkpoint JSON header truncated")
    try:
        header = json.loads(buf[10 : 10 + hlen])
    except ValueError as exc:
        raise BadMagic(f"corrupt checkpoint header: {exc}") from exc
    arch = MlpArch.from_json(header["arch"])
    expected = arch.layer_shapes()
    layers = header["layers"]
    if len(layers) != len(expected):
        raise ShapeError("checkpoint layer count does not match architecture")
    pos = 10 + hlen
    weights = []
    for entry, (ws, bs) in zip(layers, expected):
        if tuple(entry["W"]) != ws or tuple(entry["b"]) != bs:
            raise ShapeError(f"layer {entry['name']} shape does not match architecture")
        arrays = []
        for shape in (ws, bs):
            count = math.prod(shape)
            if len(buf) - pos < 4 * count:
                raise Truncated(f"weights of layer {entry['name']} truncated")
            arrays.append(np.frombuffer(buf, "<f4", count, pos).astype(np.float32).reshape(shape))
            pos += 4 * count
        weights.append(tuple(arrays))
    if pos != len(buf):
        raise Truncated(f"{len(buf) - pos} trailing bytes after weights")
    return ModeCheckpoint(arch, weights, int(header["seed"]), header["train_meta"], header["mode_id"])


def save_ckpt(path, ckpt: ModeCheckpoint) -> None:
    atomic_write_bytes(path, encode_ckpt(ckpt))


def load_ckpt(path) -> ModeCheckpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_ckpt(buf)
