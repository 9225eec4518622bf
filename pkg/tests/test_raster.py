import itertools

import numpy as np
import pytest

from rpcvol.errors import FrameError, OverlapError
from rpcvol.raster import (DsmGrid, GridFrame, PointCloud, align_translation,
                           apply_translation, fill_holes, interpolate_holes, merge_average,
                           rasterize, read_grid, snap_frame, stddev_map, write_ascii_grid,
                           write_binary_grid)


def grid(values, gsd=1.0):
    return DsmGrid(0.0, 0.0, gsd, np.asarray(values, dtype=float))


def terrain(h=120, w=140, seed=0):
    """Smooth random surface with a few bumps, heights in meters."""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:h, 0:w].astype(float)
    z = 0.02 * x + 0.01 * y
    for _ in range(8):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        s, a = rng.uniform(5, 15), rng.uniform(3, 12)
        z += a * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s))
    return z


def test_snap_frame():
    f = snap_frame((-10.3, 5.2, 20.1, 30.0), 1.0)
    assert f == GridFrame(-11.0, 5.0, 1.0, 32, 25)
    with pytest.raises(FrameError):
        snap_frame((0, 0, 1, 1), 0.0)


def test_cell_index_convention():
    f = GridFrame(0.0, 0.0, 1.0, 4, 3)
    e, n = f.cell_centers()
    r, c = f.cell_index(e, n)
    np.testing.assert_array_equal(r, np.repeat(np.arange(3)[:, None], 4, 1))
    np.testing.assert_array_equal(c, np.repeat(np.arange(4)[None, :], 3, 0))
    assert n[0, 0] == 2.5  # row 0 is the northern edge


def test_rasterize_one_point_per_cell():
    f = GridFrame(0.0, 0.0, 1.0, 3, 2)
    e, n = f.cell_centers()
    h = np.arange(6.0).reshape(2, 3)
    g = rasterize(PointCloud(np.c_[e.ravel(), n.ravel(), h.ravel()]), f)
    np.testing.assert_array_equal(g.values, h)


def test_rasterize_median_and_empty():
    f = GridFrame(0.0, 0.0, 1.0, 2, 1)
    pts = np.array([[0.2, 0.5, 1.0], [0.5, 0.5, 100.0], [0.7, 0.4, 2.0],
                    [5.0, 5.0, 7.0]])  # last point falls outside the frame
    g = rasterize(pts, f)
    assert g.values[0, 0] == 2.0
    assert np.isnan(g.values[0, 1])


def test_rasterize_analytic_surface():
    f = GridFrame(0.0, 0.0, 1.0, 60, 50)

    def surface(e, n):
        return 3 * np.sin(e / 9.0) + 2 * np.cos(n / 7.0) + 0.05 * e

    # 4 points per cell on a regular half-cell lattice
    e, n = np.meshgrid(np.arange(0.25, 60, 0.5), np.arange(0.25, 50, 0.5))
    e, n = e.ravel(), n.ravel()
    g = rasterize(np.c_[e, n, surface(e, n)], f)
    ce, cn = f.cell_centers()
    err = g.values - surface(ce, cn)
    assert np.sqrt(np.mean(err ** 2)) < 0.05


def test_rasterize_rejects_nonfinite():
    with pytest.raises(ValueError):
        rasterize(np.array([[0.0, 0.0, np.nan]]), GridFrame(0, 0, 1, 1, 1))


def test_merge_average_examples():
    a = grid([[10.0, 10.0, np.nan]])
    b = grid([[np.nan, 12.0, np.nan]])
    m = merge_average([a, b])
    assert m.values[0, 0] == 10.0 and m.values[0, 1] == 11.0 and np.isnan(m.values[0, 2])
    np.testing.assert_array_equal(merge_average([a, a]).values, a.values)


def test_merge_frame_mismatch():
    with pytest.raises(FrameError):
        merge_average([grid([[1.0]]), DsmGrid(1.0, 0.0, 1.0, np.array([[1.0]]))])


def test_stddev_examples():
    a = grid([[0.0, 4.0, 1.0]])
    b = grid([[2.0, 4.0, np.nan]])
    s = stddev_map([a, b])
    assert s.values[0, 0] == 1.0 and s.values[0, 1] == 0.0 and np.isnan(s.values[0, 2])
    with pytest.raises(ValueError):
        stddev_map([a])


def test_reductions_permutation_invariant():
    rng = np.random.default_rng(1)
    gs = []
    for _ in range(4):
        v = rng.normal(100, 3, (20, 30))
        v[rng.random(v.shape) < 0.3] = np.nan
        gs.append(grid(v))
    m0, s0 = merge_average(gs).values, stddev_map(gs).values
    for perm in itertools.permutations(gs):
        assert merge_average(list(perm)).values.tobytes() == m0.tobytes()
        assert stddev_map(list(perm)).values.tobytes() == s0.tobytes()


def test_fill_single_hole_constant():
    v = np.full((9, 9), 5.0)
    v[4, 4] = np.nan
    out = fill_holes(grid(v))
    assert out.values[4, 4] == 5.0


def test_interpolate_hole_in_plane():
    y, x = np.mgrid[0:15, 0:15].astype(float)
    plane = 2.0 + 0.3 * x - 0.7 * y
    v = plane.copy()
    v[6:9, 6:9] = np.nan
    out = interpolate_holes(v)
    np.testing.assert_allclose(out[6:9, 6:9], plane[6:9, 6:9], atol=1e-6)


def test_fill_hole_in_plane_center():
    # the median pass reproduces a plane only where the window is symmetric
    y, x = np.mgrid[0:15, 0:15].astype(float)
    plane = 0.3 * x - 0.7 * y
    v = plane.copy()
    v[6:9, 6:9] = np.nan
    out = fill_holes(grid(v)).values
    assert out[7, 7] == pytest.approx(plane[7, 7], abs=1e-6)
    assert not np.isnan(out).any()


def test_fill_exterior_unchanged():
    v = np.full((12, 12), np.nan)
    v[3:9, 3:9] = 7.0
    v[5, 5] = np.nan
    out = fill_holes(grid(v)).values
    assert out[5, 5] == 7.0
    assert np.isnan(out[:3]).all() and np.isnan(out[:, 9:]).all()


def test_fill_never_touches_valid_cells():
    rng = np.random.default_rng(2)
    v = terrain(60, 70)
    v[rng.random(v.shape) < 0.4] = np.nan
    out = fill_holes(grid(v)).values
    ok = ~np.isnan(v)
    assert np.array_equal(out[ok], v[ok])
    assert np.isnan(out).sum() < np.isnan(v).sum()


def test_fill_all_nodata_warns():
    g = grid(np.full((4, 4), np.nan))
    with pytest.warns(RuntimeWarning):
        out = fill_holes(g)
    assert out is g


def test_align_self():
    g = grid(terrain())
    a = align_translation(g, g)
    np.testing.assert_allclose([a.de, a.dn, a.dh], 0.0, atol=1e-9)
    assert not a.on_border


def shifted(z, dr, dc, dh):
    """mov[r, c] = z[r - dr, c - dc] + dh, i.e. content moved dc cells east and
    dr cells south, nodata where it slid in from outside."""
    out = np.full_like(z, np.nan)
    H, W = z.shape
    out[max(dr, 0):H + min(dr, 0), max(dc, 0):W + min(dc, 0)] = \
        z[max(-dr, 0):H - max(dr, 0), max(-dc, 0):W - max(dc, 0)]
    return out + dh


@pytest.mark.parametrize("gsd", [1.0, 0.5])
def test_align_constructed_shift(gsd):
    z = terrain()
    ref = grid(z, gsd)
    # +3 cells east, -2 cells north (two rows down), raised by 1.5 m
    mov = grid(shifted(z, 2, 3, 1.5), gsd)
    a = align_translation(ref, mov)
    assert a.de == pytest.approx(-3 * gsd, abs=0.1)
    assert a.dn == pytest.approx(2 * gsd, abs=0.1)
    assert a.dh == pytest.approx(-1.5, abs=0.01)


def test_align_then_apply_recovers_reference():
    z = terrain()
    ref = grid(z)
    mov = grid(shifted(z, 2, 3, 1.5))  # content moved 3 east and 2 south
    a = align_translation(ref, mov)
    np.testing.assert_allclose([a.de, a.dn, a.dh], [-3.0, 2.0, -1.5], atol=0.01)
    back = apply_translation(mov, a.de, a.dn, a.dh)
    both = back.valid & ref.valid
    assert both.sum() > 0.8 * z.size
    assert np.max(np.abs(back.values[both] - z[both])) < 0.05


def test_align_noisy_shift():
    z = terrain()
    rng = np.random.default_rng(3)
    ref = grid(z + rng.normal(0, 0.2, z.shape))
    mov = grid(shifted(z, 2, 3, 1.5) + rng.normal(0, 0.2, z.shape))
    a = align_translation(ref, mov)
    assert abs(a.de + 3.0) < 0.3 and abs(a.dn - 2.0) < 0.3 and abs(a.dh + 1.5) < 0.05


def test_align_overlap_and_frame_errors():
    z = terrain()
    a = grid(z)
    b = np.full_like(z, np.nan)
    b[:10, :10] = z[:10, :10]
    with pytest.raises(OverlapError):
        align_translation(a, grid(b))
    with pytest.raises(FrameError):
        align_translation(a, DsmGrid(1.0, 0.0, 1.0, z))


def test_align_border_flag():
    z = terrain()
    a = align_translation(grid(z), grid(shifted(z, 0, 6, 0.0)), search_radius=3)
    assert a.on_border


def test_subcell_translation_roundtrip():
    y, x = np.mgrid[0:30, 0:30].astype(float)
    g = grid(0.4 * x + 0.1 * y)
    moved = apply_translation(apply_translation(g, 0.3, -0.6, 0.2), -0.3, 0.6, -0.2)
    ok = moved.valid
    np.testing.assert_allclose(moved.values[ok], g.values[ok], atol=1e-9)


@pytest.mark.parametrize("writer", [write_ascii_grid, write_binary_grid])
def test_grid_io_roundtrip(tmp_path, writer):
    v = np.array([[1.25, np.nan, -3.5], [100.0, 7.0, np.nan]])
    g = DsmGrid(-120.0, 35.0, 0.5, v)
    path = str(tmp_path / "g.asc")
    writer(path, g)
    back = read_grid(path)
    assert back.frame == g.frame
    np.testing.assert_array_equal(np.isnan(back.values), np.isnan(v))
    np.testing.assert_allclose(back.values[g.valid], v[g.valid], rtol=1e-6)


def test_ascii_header(tmp_path):
    path = tmp_path / "g.asc"
    write_ascii_grid(str(path), DsmGrid(10.0, 20.0, 1.0, np.array([[np.nan, 2.0]])))
    lines = path.read_text().splitlines()
    assert [l.split()[0] for l in lines[:6]] == ["ncols", "nrows", "xllcorner", "yllcorner",
                                                 "cellsize", "NODATA_value"]
    assert lines[6].split()[0] == "-9999"


def test_grid_immutable():
    g = grid([[1.0]])
    with pytest.raises(ValueError):
        g.values[0, 0] = 2.0
    with pytest.raises(ValueError):
        grid([[np.inf]])
