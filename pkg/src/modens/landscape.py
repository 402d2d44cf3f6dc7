"""Loss surfaces around modes, emitted as grids for external plotting.

``plane_grid`` evaluates the loss on the affine plane through three modes;
``slice_grid`` evaluates it on a random 2-D slice around a single mode with
each direction rescaled layer by layer to the mode's own layer norms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledDataset, atomic_write_bytes, dumps_json, write_tensor
from .errors import DataError, ShapeError
from .model import ModeCheckpoint, forward, mean_loss
from .numkit import Rng

DEFAULT_RESOLUTION = 41
DEFAULT_MARGIN = 0.2
DEFAULT_RADIUS = 1.0
COLLINEAR_RTOL = 1e-4  # float32 storage leaves ~1e-7 relative noise off the line


@dataclass
class LossGrid:
    origin: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    x_coords: np.ndarray
    y_coords: np.ndarray
    values: np.ndarray  # [len(y), len(x)]
    markers: list[tuple[float, float]] = field(default_factory=list)
    marker_losses: list[float] = field(default_factory=list)
    mode_ids: list[str] = field(default_factory=list)
    dataset_id: str = ""
    kind: str = "plane"

    def metadata(self) -> dict:
        return {
            "kind": self.kind,
            "dataset": self.dataset_id,
            "mode_ids": list(self.mode_ids),
            "resolution": [len(self.y_coords), len(self.x_coords)],
            "x_range": [float(self.x_coords[0]), float(self.x_coords[-1])],
            "y_range": [float(self.y_coords[0]), float(self.y_coords[-1])],
            "axis_norms": [float(np.linalg.norm(self.axis_u)), float(np.linalg.norm(self.axis_v))],
            "markers": [[float(a), float(b)] for a, b in self.markers],
            "marker_losses": [float(v) for v in self.marker_losses],
        }


def point_loss(template: ModeCheckpoint, params, ds: LabeledDataset) -> float:
    return mean_loss(template.with_params(params), ds)


def plane_params(grid_or_origin, a: float, b: float, axis_u=None, axis_v=None) -> np.ndarray:
    if isinstance(grid_or_origin, LossGrid):
        g = grid_or_origin
        return g.origin + a * g.axis_u + b * g.axis_v
    return grid_or_origin + a * axis_u + b * axis_v


def _centered(g: int) -> np.ndarray:
    return (2.0 * np.arange(g) - (g - 1)) / (g - 1)


def _fill(template, ds, origin, u, v, xs, ys) -> np.ndarray:
    vals = np.empty((ys.size, xs.size))
    for i, b in enumerate(ys):
        for j, a in enumerate(xs):
            vals[i, j] = point_loss(template, origin + a * u + b * v, ds)
    return vals


def plane_grid(
    ckpts,
    ds: LabeledDataset,
    resolution: int = DEFAULT_RESOLUTION,
    margin: float = DEFAULT_MARGIN,
) -> LossGrid:
    """Loss over the plane through three modes.

    Plane coordinates: mode 1 at (0, 0), mode 2 at (1, 0), mode 3 at
    (c, 1) where ``c`` is the projection of ``w3 - w1`` on ``w2 - w1``.
    The grid spans every marker plus ``margin`` on each side.
    """
    if len(ckpts) != 3:
        raise DataError("plane_grid needs exactly three modes")
    if any(c.arch != ckpts[0].arch for c in ckpts):
        raise ShapeError("modes do not share an architecture")
    if resolution < 2:
        raise DataError("resolution must be >= 2")
    w1, w2, w3 = (c.flat_params() for c in ckpts)
    u = w2 - w1
    uu = float(u @ u)
    if uu == 0.0:
        raise DataError("modes 1 and 2 coincide; the plane is degenerate")
    d3 = w3 - w1
    c = float(d3 @ u) / uu
    v = d3 - c * u
    if not np.linalg.norm(v) > COLLINEAR_RTOL * math.sqrt(uu):
        raise DataError("the three modes are collinear; the plane is degenerate")
    markers = [(0.0, 0.0), (1.0, 0.0), (c, 1.0)]
    xs = np.linspace(min(0.0, c) - margin, max(1.0, c) + margin, resolution)
    ys = np.linspace(-margin, 1.0 + margin, resolution)
    vals = _fill(ckpts[0], ds, w1, u, v, xs, ys)
    mloss = [point_loss(ckpts[0], w1 + a * u + b * v, ds) for a, b in markers]
    return LossGrid(w1, u, v, xs, ys, vals, markers, mloss, [k.mode_id for k in ckpts], ds.name, "plane")


def _layer_normalized(ckpt: ModeCheckpoint, direction: np.ndarray) -> np.ndarray:
    out = np.empty_like(direction)
    pos = 0
    for W, b in ckpt.weights:
        n = W.size + b.size
        w_norm = np.linalg.norm(np.concatenate([W.ravel(), b]).astype(np.float64))
        d = direction[pos : pos + n]
        d_norm = np.linalg.norm(d)
        out[pos : pos + n] = d * (w_norm / d_norm) if d_norm > 0 else 0.0
        pos += n
    return out


def slice_grid(
    ckpt: ModeCheckpoint,
    ds: LabeledDataset,
    resolution: int = DEFAULT_RESOLUTION,
    radius: float = DEFAULT_RADIUS,
    rng: Rng | None = None,
) -> LossGrid:
    """Loss over ``w + a*d1 + b*d2`` for ``a, b`` in ``[-radius, radius]``."""
    rng = rng if rng is not None else Rng(0)
    w = ckpt.flat_params()
    d1 = _layer_normalized(ckpt, rng.normal(w.size))
    d2 = _layer_normalized(ckpt, rng.normal(w.size))
    coords = radius * _centered(resolution) if resolution > 1 else np.zeros(1)
    vals = _fill(ckpt, ds, w, d1, d2, coords, coords)
    return LossGrid(w, d1, d2, coords, coords, vals, [(0.0, 0.0)], [mean_loss(ckpt, ds)], [ckpt.mode_id], ds.name, "slice")


def write_grid(grid: LossGrid, stem) -> list[Path]:
    """Write ``<stem>.json`` metadata, ``<stem>.mten`` values and ``<stem>.csv``."""
    stem = Path(stem)
    paths = [stem.with_suffix(".json"), stem.with_suffix(".mten"), stem.with_suffix(".csv")]
    atomic_write_bytes(paths[0], dumps_json(grid.metadata()).encode())
    write_tensor(paths[1], grid.values)
    lines = ["row,col,x,y,loss"]
    for i, y in enumerate(grid.y_coords):
        for j, x in enumerate(grid.x_coords):
            lines.append(f"{i},{j},{float(x)!r},{float(y)!r},{float(grid.values[i, j])!r}")
    atomic_write_bytes(paths[2], ("\n".join(lines) + "\n").encode())
    return paths


def dump_feature_trajectory(checkpoint_series, datasets: dict[str, LabeledDataset], out_dir) -> list[Path]:
    """Penultimate features of every checkpoint on every dataset, one MTEN file each."""
    if not checkpoint_series:
        raise DataError("empty checkpoint series")
    out_dir = Path(out_dir)
    paths = []
    for i, ck in enumerate(checkpoint_series):
        for name, ds in datasets.items():
            p = out_dir / f"{ck.mode_id}.step{i:03d}.{name}.mten"
            write_tensor(p, forward(ck, ds.x, name).penultimate)
            paths.append(p)
    return paths
