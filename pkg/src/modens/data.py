"""Synthetic InD/OoD data and the MTEN tensor file format.

Two generators live here. The binary Gaussian task (labels in {-1, +1},
``x ~ N(mu * y, sigma^2 I)``) and its shifted OoD counterpart feed the
theory module. The multi-class blob benchmark feeds mode training: ``C``
isotropic blobs on a circle of radius ``R`` in the first two coordinates,
plus OoD sets built by named recipes.

MTEN layout (little endian)::

    bytes 0-3   b"MTEN"
    u16         version = 1
    u8          dtype   = 1 (float32)
    u8          ndim
    ndim * u64  dims
    payload     row-major float32
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadDtype,
    BadMagic,
    DataError,
    ShapeError,
    Truncated,
    VersionMismatch,
)
from .numkit import Rng, as_tensor

MAGIC = b"MTEN"
VERSION = 1
DTYPE_F32 = 1

OOD_RECIPES = ("mean-shift", "scale", "ring", "uniform")


@dataclass
class GaussianSpec:
    mu: np.ndarray
    sigma: float
    alpha: float = 1.0
    beta: float = 0.0
    gamma: float = 1.0
    delta: np.ndarray | None = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.delta = (
            np.zeros_like(self.mu) if self.delta is None else np.asarray(self.delta, dtype=np.float64)
        )
        if self.mu.ndim != 1 or self.delta.shape != self.mu.shape:
            raise ShapeError("mu and delta must be rank-1 tensors of equal length")
        if not self.sigma > 0 or not self.gamma > 0:
            raise DataError("sigma and gamma must be positive")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @property
    def mu_out(self) -> np.ndarray:
        return self.alpha * self.mu + self.beta * self.delta

    @property
    def sigma_out(self) -> float:
        return self.gamma * self.sigma


@dataclass
class LabeledDataset:
    """Samples ``x [n, D]`` with integer labels ``y`` in ``{0, ..., C-1}``.

    For the binary Gaussian task label 0 stands for y = -1 and 1 for y = +1.
    """

    x: np.ndarray
    y: np.ndarray
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = as_tensor(self.x)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.x.shape[0] != self.y.shape[0]:
            raise ShapeError(f"x {self.x.shape} and y {self.y.shape} disagree")
        if self.y.size and self.y.min() < 0:
            raise DataError("labels must be non-negative")

    def __len__(self) -> int:
        return self.x.shape[0]

    def signed_labels(self) -> np.ndarray:
        return 2 * self.y - 1


def _sample_binary(mean, std, n, rng, name):
    if n < 1:
        raise DataError("n must be >= 1")
    signs = np.where(rng.uniform(n) < 0.5, -1.0, 1.0)
    noise = rng.normal((n, mean.shape[0]))
    x = signs[:, None] * mean[None, :] + std * noise
    return LabeledDataset(x, ((signs + 1) // 2).astype(np.int64), name)


def sample_ind(spec: GaussianSpec, n: int, rng: Rng, name: str = "ind") -> LabeledDataset:
    return _sample_binary(spec.mu, spec.sigma, n, rng, name)


def sample_ood(spec: GaussianSpec, n: int, rng: Rng, name: str = "ood") -> LabeledDataset:
    return _sample_binary(spec.mu_out, spec.sigma_out, n, rng, name)


# ---------------------------------------------------------------- benchmark

DEFAULT_BENCHMARK = {
    "dim": 2,
    "num_classes": 4,
    "radius": 3.0,
    "sigma": 0.6,
    "n_train": 2000,
    "n_test": 1000,
    "n_ood": 1000,
    "seed": 2024,
    "ood": [
        {"name": "near_ood", "recipe": "mean-shift", "alpha": 1.0, "beta": 1.5, "gamma": 1.0},
        {"name": "far_ood", "recipe": "mean-shift", "alpha": 1.0, "beta": 4.0, "gamma": 1.0},
        {"name": "scale_ood", "recipe": "scale", "alpha": 1.0, "beta": 0.0, "gamma": 2.5},
    ],
}


def blob_means(num_classes: int, dim: int, radius: float) -> np.ndarray:
    if dim < 2:
        raise DataError("blob benchmark needs dim >= 2")
    ang = 2.0 * math.pi * np.arange(num_classes) / num_classes
    means = np.zeros((num_classes, dim))
    means[:, 0] = radius * np.cos(ang)
    means[:, 1] = radius * np.sin(ang)
    return means


def _labels(rng: Rng, n: int, num_classes: int) -> np.ndarray:
    return np.minimum((rng.uniform(n) * num_classes).astype(np.int64), num_classes - 1)


def _unit(rng: Rng, dim: int) -> np.ndarray:
    d = rng.normal(dim)
    return d / np.linalg.norm(d)


def _nearest_class(x: np.ndarray, means: np.ndarray) -> np.ndarray:
    d = ((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)


def sample_blobs(means, sigma, n, rng, name, alpha=1.0, beta=0.0, gamma=1.0, delta=None):
    """Blob mixture, optionally shifted: ``x ~ N(alpha*mu_y + beta*delta, (gamma*sigma)^2 I)``."""
    if n < 1:
        raise DataError("n must be >= 1")
    num_classes, dim = means.shape
    y = _labels(rng, n, num_classes)
    center = alpha * means[y]
    if delta is not None and beta != 0.0:
        center = center + beta * np.asarray(delta)[None, :]
    x = center + gamma * sigma * rng.normal((n, dim))
    return LabeledDataset(x, y, name)


def _ood_set(recipe: dict, means, sigma, n, rng, dim, radius) -> LabeledDataset:
    kind = recipe.get("recipe")
    name = recipe["name"]
    if kind in ("mean-shift", "scale"):
        delta = _unit(rng, dim)
        defaults = (1.0, 1.5, 1.0) if kind == "mean-shift" else (1.0, 0.0, 2.5)
        a, b, g = (recipe.get(k, d) for k, d in zip(("alpha", "beta", "gamma"), defaults))
        ds = sample_blobs(means, sigma, n, rng, name, a, b, g, delta)
        ds.meta = {"recipe": kind, "alpha": a, "beta": b, "gamma": g, "delta": delta.tolist()}
        return ds
    if kind == "ring":
        r = float(recipe.get("r", 2.0 * radius))
        ang = 2.0 * math.pi * rng.uniform(n)
        rad = r * (0.9 + 0.2 * rng.uniform(n))
        x = np.zeros((n, dim))
        x[:, 0] = rad * np.cos(ang)
        x[:, 1] = rad * np.sin(ang)
        ds = LabeledDataset(x, _nearest_class(x, means), name)
        ds.meta = {"recipe": kind, "r": r}
        return ds
    if kind == "uniform":
        half = float(recipe.get("half_width", 2.0 * radius))
        x = (2.0 * rng.uniform(n * dim) - 1.0).reshape(n, dim) * half
        ds = LabeledDataset(x, _nearest_class(x, means), name)
        ds.meta = {"recipe": kind, "half_width": half}
        return ds
    raise DataError(f"invalid OoD recipe {kind!r}; expected one of {OOD_RECIPES}")


def gen_benchmark(config: dict | None = None) -> dict[str, LabeledDataset]:
    """Generate ``train``, ``test`` and one dataset per OoD recipe.

    Every dataset draws from its own child stream of ``config["seed"]``, so
    adding an OoD recipe never changes the InD sets.
    """
    cfg = {**DEFAULT_BENCHMARK, **(config or {})}
    num_classes = int(cfg["num_classes"])
    if num_classes < 2:
        raise DataError("need >=2 classes")
    dim, radius, sigma = int(cfg["dim"]), float(cfg["radius"]), float(cfg["sigma"])
    means = blob_means(num_classes, dim, radius)
    root = Rng(int(cfg["seed"]))
    out = {
        "train": sample_blobs(means, sigma, int(cfg["n_train"]), root.child(1), "train"),
        "test": sample_blobs(means, sigma, int(cfg["n_test"]), root.child(2), "test"),
    }
    for i, recipe in enumerate(cfg["ood"]):
        if recipe["name"] in out:
            raise DataError(f"duplicate dataset name {recipe['name']!r}")
        out[recipe["name"]] = _ood_set(
            recipe, means, sigma, int(cfg["n_ood"]), root.child(10 + i), dim, radius
        )
    for name, ds in out.items():
        ds.meta.setdefault("role", "ood" if name not in ("train", "test") else name)
    return out


# ---------------------------------------------------------------- MTEN I/O


def encode_tensor(t) -> bytes:
    t = np.asarray(t)
    if t.dtype != np.float32:
        t = t.astype(np.float32)
    head = MAGIC + struct.pack("<HBB", VERSION, DTYPE_F32, t.ndim)
    head += struct.pack(f"<{t.ndim}Q", *t.shape)
    return head + np.ascontiguousarray(t, dtype="<f4").tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor starting at ``offset``; return it and the end offset."""
    if len(buf) - offset < 8:
        raise Truncated("header shorter than 8 bytes")
    if buf[offset : offset + 4] != MAGIC:
        raise BadMagic(f"bad magic {bytes(buf[offset:offset + 4])!r}")
    version, dtype, ndim = struct.unpack_from("<HBB", buf, offset + 4)
    if version != VERSION:
        raise VersionMismatch(f"unsupported version {version}")
    if dtype != DTYPE_F32:
        raise BadDtype(f"unsupported dtype code {dtype}")
    pos = offset + 8
    if len(buf) - pos < 8 * ndim:
        raise Truncated("dims truncated")
    dims = struct.unpack_from(f"<{ndim}Q", buf, pos)
    pos += 8 * ndim
    count = math.prod(dims)
    nbytes = 4 * count
    if len(buf) - pos < nbytes:
        raise Truncated(f"payload needs {nbytes} bytes, found {len(buf) - pos}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(np.float32)
    return data.reshape(dims), pos + nbytes


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor(path, t) -> None:
    atomic_write_bytes(path, encode_tensor(t))


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    t, end = decode_tensor(buf)
    if end != len(buf):
        raise Truncated(f"{len(buf) - end} trailing bytes after payload")
    return t


# ---------------------------------------------------------------- manifests

MANIFEST = "manifest.json"


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_datasets(out_dir, datasets: dict[str, LabeledDataset]) -> Path:
    """Write each dataset as ``<name>.x.mten`` and ``<name>.y.mten`` plus a manifest."""
    out_dir = Path(out_dir)
    entries = {}
    for name, ds in datasets.items():
        write_tensor(out_dir / f"{name}.x.mten", ds.x)
        write_tensor(out_dir / f"{name}.y.mten", ds.y.astype(np.float32))
        entries[name] = {"x": f"{name}.x.mten", "y": f"{name}.y.mten", "meta": ds.meta}
    path = out_dir / MANIFEST
    atomic_write_bytes(path, dumps_json({"datasets": entries}).encode())
    return path


def read_datasets(manifest_path) -> dict[str, LabeledDataset]:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST
    try:
        doc = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
    root = manifest_path.parent
    out = {}
    for name, entry in doc["datasets"].items():
        x = read_tensor(root / entry["x"])
        y = read_tensor(root / entry["y"]).astype(np.int64)
        out[name] = LabeledDataset(x, y, name, dict(entry.get("meta", {})))
    return out
