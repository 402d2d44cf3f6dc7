import json

import numpy as np
import pytest

from modens.data import read_tensor
from modens.errors import DataError
from modens.landscape import dump_feature_trajectory, plane_grid, plane_params, slice_grid, write_grid
from modens.model import mean_loss, train_trajectory, default_arch
from modens.numkit import Rng


def test_plane_anchors_match_direct_loss(modes, bench):
    g = plane_grid(modes, bench["test"], resolution=7, margin=0.2)
    assert g.values.shape == (7, 7)
    for (a, b), loss, ck in zip(g.markers, g.marker_losses, modes):
        assert abs(loss - mean_loss(ck, bench["test"])) <= 1e-6
        assert np.allclose(plane_params(g, a, b), ck.flat_params(), atol=1e-5)
    c = g.markers[2][0]
    assert g.x_coords[0] == pytest.approx(min(0.0, c) - 0.2)
    assert g.x_coords[-1] == pytest.approx(max(1.0, c) + 0.2)
    assert g.y_coords[0] == pytest.approx(-0.2) and g.y_coords[-1] == pytest.approx(1.2)


def test_plane_grid_values_are_point_losses(modes, bench):
    g = plane_grid(modes, bench["near_ood"], resolution=3, margin=0.1)
    ck = modes[0].with_params(plane_params(g, g.x_coords[1], g.y_coords[2]))
    assert g.values[2, 1] == mean_loss(ck, bench["near_ood"])


def test_plane_degenerate(modes, bench):
    with pytest.raises(DataError):
        plane_grid([modes[0], modes[0], modes[1]], bench["test"], 3)
    w1, w2 = modes[0].flat_params(), modes[1].flat_params()
    mid = modes[0].with_params(0.5 * (w1 + w2))
    with pytest.raises(DataError):
        plane_grid([modes[0], modes[1], mid], bench["test"], 3)
    with pytest.raises(DataError):
        plane_grid(modes[:2], bench["test"], 3)


def test_slice_is_centered_and_layer_normalized(modes, bench):
    g = slice_grid(modes[0], bench["test"], resolution=5, radius=1.0, rng=Rng(2))
    assert g.x_coords.tolist() == [-1.0, -0.5, 0.0, 0.5, 1.0]
    assert g.values[2, 2] == pytest.approx(g.marker_losses[0], abs=1e-6)
    pos = 0
    for W, b in modes[0].weights:
        n = W.size + b.size
        ref = np.linalg.norm(np.concatenate([W.ravel(), b]))
        assert np.linalg.norm(g.axis_u[pos : pos + n]) == pytest.approx(ref, rel=1e-6)
        pos += n
    again = slice_grid(modes[0], bench["test"], resolution=5, radius=1.0, rng=Rng(2))
    assert np.array_equal(g.values, again.values)


def test_write_grid(tmp_path, modes, bench):
    g = slice_grid(modes[1], bench["test"], resolution=3, rng=Rng(1))
    paths = write_grid(g, tmp_path / "s")
    assert np.allclose(read_tensor(paths[1]), g.values)
    meta = json.loads(paths[0].read_text())
    assert meta["kind"] == "slice" and meta["resolution"] == [3, 3]
    lines = paths[2].read_text().splitlines()
    assert lines[0] == "row,col,x,y,loss" and len(lines) == 10


def test_feature_trajectory(tmp_path, bench):
    _, snaps = train_trajectory(default_arch(), bench["train"], 1, epochs=4, snapshot_every=2)
    sets = {"test": bench["test"], "far_ood": bench["far_ood"]}
    paths = dump_feature_trajectory(snaps, sets, tmp_path)
    assert len(paths) == 4
    assert (tmp_path / "seed1.step001.far_ood.mten").exists()
    assert read_tensor(paths[0]).shape == (300, 64)
    with pytest.raises(DataError):
        dump_feature_trajectory([], sets, tmp_path)
