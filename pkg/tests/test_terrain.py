import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from terrapose import terrain
from terrapose.errors import (
    InvalidShapeParam,
    MissingHeaderKey,
    NodataNeighborhood,
    NonRectangularBody,
    OutOfExtent,
    UnparsableNumber,
)


def bilinear_reference(grid, x, y):
    """Independent direct-formula bilinear evaluation (re-implementation oracle)."""
    u = (x - grid.origin_easting) / grid.cell_size
    v = (grid.max_northing - y) / grid.cell_size
    c0 = min(int(np.floor(u)), grid.n_cols - 2)
    r0 = min(int(np.floor(v)), grid.n_rows - 2)
    a = u - c0
    b = v - r0
    z = grid.elevations
    return (
        z[r0, c0] * (1 - a) * (1 - b)
        + z[r0, c0 + 1] * a * (1 - b)
        + z[r0 + 1, c0] * (1 - a) * b
        + z[r0 + 1, c0 + 1] * a * b
    )


def test_load_all_zero_2x2(tmp_path):
    p = tmp_path / "z.asc"
    p.write_text("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n0 0\n0 0\n")
    g = terrain.load_ascii_grid(p)
    assert g.n_cols == 2 and g.n_rows == 2
    assert np.all(g.elevations == 0.0)


def test_load_non_rectangular(tmp_path):
    p = tmp_path / "bad.asc"
    p.write_text("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n0 0\n0\n")
    with pytest.raises(NonRectangularBody) as e:
        terrain.load_ascii_grid(p)
    assert "line 7" in str(e.value)


def test_load_missing_header(tmp_path):
    p = tmp_path / "nohead.asc"
    p.write_text("ncols 2\nnrows 2\nxllcorner 0\ncellsize 1\n0 0\n0 0\n")
    with pytest.raises(MissingHeaderKey) as e:
        terrain.load_ascii_grid(p)
    assert "yllcorner" in str(e.value)


def test_load_unparsable(tmp_path):
    p = tmp_path / "garb.asc"
    p.write_text("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n0 0\n0 oops\n")
    with pytest.raises(UnparsableNumber) as e:
        terrain.load_ascii_grid(p)
    assert "line 7" in str(e.value) and "oops" in str(e.value)


def test_roundtrip_random_16x16(tmp_path):
    rng = np.random.default_rng(7)
    g = terrain.DemGrid(
        origin_easting=1234.5,
        origin_northing=-99.25,
        cell_size=12.5,
        elevations=rng.normal(500.0, 120.0, size=(16, 16)),
    )
    p = tmp_path / "r.asc"
    terrain.write_ascii_grid(g, p)
    g2 = terrain.load_ascii_grid(p)
    assert np.array_equal(g.elevations, g2.elevations)
    assert g2.origin_easting == g.origin_easting
    assert g2.origin_northing == g.origin_northing
    assert g2.cell_size == g.cell_size


@settings(max_examples=25, deadline=None)
@given(
    nc=st.integers(2, 9),
    nr=st.integers(2, 9),
    cell=st.floats(0.5, 100.0),
    seed=st.integers(0, 2**31 - 1),
)
def test_roundtrip_property(nc, nr, cell, seed, tmp_path_factory):
    rng = np.random.default_rng(seed)
    g = terrain.DemGrid(0.0, 0.0, cell, rng.normal(0.0, 1000.0, size=(nr, nc)))
    p = tmp_path_factory.mktemp("rt") / "g.asc"
    terrain.write_ascii_grid(g, p)
    g2 = terrain.load_ascii_grid(p)
    assert np.array_equal(g.elevations, g2.elevations)
    assert g2.cell_size == g.cell_size


def test_sample_at_nodes():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(5, 7))
    g = terrain.DemGrid(10.0, 20.0, 2.0, z)
    for row in range(5):
        for col in range(7):
            x, y = g.node_coords(row, col)
            assert terrain.sample_elevation(g, x, y) == pytest.approx(z[row, col], abs=0)


def test_sample_cell_center():
    # corners 0,0,0,4 -> bilinear mean 1.0 at the cell center
    z = np.array([[0.0, 0.0], [0.0, 4.0]])
    g = terrain.DemGrid(0.0, 0.0, 1.0, z)
    assert terrain.sample_elevation(g, 0.5, 0.5) == pytest.approx(1.0, abs=1e-12)


def test_sample_random_vs_reference():
    rng = np.random.default_rng(11)
    g = terrain.DemGrid(-50.0, 30.0, 3.0, rng.normal(100.0, 25.0, size=(12, 9)))
    xs = rng.uniform(g.origin_easting, g.max_easting, 100)
    ys = rng.uniform(g.origin_northing, g.max_northing, 100)
    for x, y in zip(xs, ys):
        assert terrain.sample_elevation(g, x, y) == pytest.approx(
            bilinear_reference(g, x, y), abs=1e-9
        )


def test_sample_errors():
    g = terrain.DemGrid(0.0, 0.0, 1.0, np.zeros((3, 3)))
    with pytest.raises(OutOfExtent):
        terrain.sample_elevation(g, -0.1, 1.0)
    with pytest.raises(OutOfExtent):
        terrain.sample_elevation(g, 1.0, 2.5)
    z = np.zeros((3, 3))
    z[1, 1] = terrain.DEFAULT_NODATA
    gn = terrain.DemGrid(0.0, 0.0, 1.0, z)
    with pytest.raises(NodataNeighborhood):
        terrain.sample_elevation(gn, 0.5, 0.5)


def test_sample_continuity_across_boundaries():
    rng = np.random.default_rng(5)
    g = terrain.DemGrid(0.0, 0.0, 1.0, rng.normal(size=(6, 6)))
    # sample exactly on interior node lines; approach from both sides
    for xb in (1.0, 2.0, 3.0, 4.0):
        for y in rng.uniform(0.0, 5.0, 5):
            left = terrain.sample_elevation(g, xb - 1e-12, y)
            right = terrain.sample_elevation(g, xb + 1e-12, y)
            assert abs(left - right) < 1e-9


def test_sample_grid_vectorized_matches_scalar():
    rng = np.random.default_rng(13)
    g = terrain.DemGrid(0.0, 0.0, 2.0, rng.normal(size=(8, 8)))
    xs = rng.uniform(0.0, 14.0, 50)
    ys = rng.uniform(0.0, 14.0, 50)
    zv = terrain.sample_elevation_grid(g, xs, ys)
    for x, y, z in zip(xs, ys, zv):
        assert z == pytest.approx(terrain.sample_elevation(g, x, y), abs=1e-12)
    assert np.isnan(terrain.sample_elevation_grid(g, np.array([-1.0]), np.array([0.0])))[0]


def test_synth_flat():
    g = terrain.synth_terrain("flat", 8, 8, 5.0, height=0.0)
    assert np.all(g.elevations == 0.0)
    rng = np.random.default_rng(1)
    gh = terrain.synth_terrain("flat", 8, 8, 5.0, height=42.0)
    for _ in range(20):
        x = rng.uniform(0.0, 35.0)
        y = rng.uniform(0.0, 35.0)
        assert terrain.sample_elevation(gh, x, y) == pytest.approx(42.0, abs=1e-12)


def test_synth_gaussian_peak():
    g = terrain.synth_terrain("gaussian_hill", 9, 9, 10.0, amplitude=123.0, sigma=30.0)
    # center node of a 9x9 grid is exactly the hill center
    assert g.elevations[4, 4] == pytest.approx(123.0, abs=0)
    assert np.max(g.elevations) == pytest.approx(123.0)


def test_synth_cone_closed_form():
    amp, slope = 200.0, 0.5
    g = terrain.synth_terrain("cone", 11, 11, 4.0, amplitude=amp, slope=slope)
    cx = cy = 4.0 * 10 / 2
    for row in range(11):
        for col in range(11):
            x, y = g.node_coords(row, col)
            d = np.hypot(x - cx, y - cy)
            assert g.elevations[row, col] == pytest.approx(max(0.0, amp - slope * d), abs=1e-9)


def test_synth_invalid_params():
    with pytest.raises(InvalidShapeParam):
        terrain.synth_terrain("gaussian_hill", 8, 8, 5.0, amplitude=1.0, sigma=-2.0)
    with pytest.raises(InvalidShapeParam):
        terrain.synth_terrain("cone", 8, 8, 5.0, amplitude=1.0, slope=0.0)
    with pytest.raises(InvalidShapeParam):
        terrain.synth_terrain("volcano", 8, 8, 5.0)
