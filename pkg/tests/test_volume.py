from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rpcvol import synth
from rpcvol.errors import InsufficientDataError, RegressionError
from rpcvol.raster import DsmGrid, GridFrame
from rpcvol.volume import (VolumeSeries, WeightRegression, compute_dynamic_mask,
                           compute_ndsm, estimate_dtm, fit_weight_regression,
                           integrate_volume, interpolate_series, predict_weight,
                           read_weights, write_regression_report, write_volume_report)


def grid(values, gsd=1.0):
    return DsmGrid(0.0, 0.0, gsd, np.asarray(values, dtype=float))


def sampled(world, gsd):
    """World surface sampled at cell centers of a frame over its bounds."""
    e0, n0, e1, n1 = world.bounds()
    f = GridFrame(e0, n0, gsd, int(round((e1 - e0) / gsd)), int(round((n1 - n0) / gsd)))
    E, N = f.cell_centers()
    return DsmGrid(e0, n0, gsd, world.surface(E, N))


def daily(n, start=date(2022, 1, 1)):
    return [start + timedelta(days=k) for k in range(n)]


def test_dtm_constant():
    g = grid(np.full((10, 10), 10.0))
    assert np.all(estimate_dtm(g).values == 10.0)


def test_dtm_lower_block_boundary():
    v = np.full((20, 20), 20.0)
    v[:5] = 5.0
    assert np.all(estimate_dtm(grid(v)).values == 5.0)


def test_dtm_ignores_nodata_and_needs_cells():
    v = np.full((10, 10), np.nan)
    v[:9, :11] = 3.0
    with pytest.raises(InsufficientDataError):
        estimate_dtm(grid(v))
    v = np.full((11, 10), 3.0)
    v[0, :5] = np.nan
    assert estimate_dtm(grid(v)).values[0, 0] == 3.0


def test_dtm_on_pile_field():
    piles = (synth.Pile(-40, -30, 18, 22), synth.Pile(50, 40, 12, 18))
    world = synth.SyntheticWorld(0, (300.0, 300.0), piles)
    g = sampled(world, 1.0)
    covered = np.mean(g.values - 100.0 > 0.1)
    assert 0.2 < covered < 0.4
    assert abs(estimate_dtm(g).values[0, 0] - 100.0) < 0.1


def test_mask_constant_series_empty():
    s = [grid(np.full((8, 8), 4.0)) for _ in range(4)]
    assert not compute_dynamic_mask(s).values.any()


def test_mask_block_kept_flicker_removed():
    base = np.zeros((12, 12))
    series = []
    for t in range(4):
        v = base.copy()
        v[2:5, 2:5] = 10.0 * (t % 2)
        v[9, 9] = 10.0 * (t % 2)
        series.append(grid(v))
    m = compute_dynamic_mask(series).values
    assert m[2:5, 2:5].all()
    assert m.sum() == 9 and not m[9, 9]


def test_mask_needs_three_valid_dates():
    v = np.zeros((6, 6))
    series = [grid(v), grid(v + 10), grid(np.full((6, 6), np.nan)), grid(v)]
    series[2] = grid(np.where(np.arange(36).reshape(6, 6) < 18, np.nan, 0.0))
    m = compute_dynamic_mask(series).values
    assert m.any()
    with pytest.raises(InsufficientDataError):
        compute_dynamic_mask(series[:2])


def test_mask_threshold_is_strict():
    a, b = np.zeros((5, 5)), np.full((5, 5), 2.0)
    # population std of (0, 2, 0, 2) is exactly 1
    assert not compute_dynamic_mask([grid(a), grid(b), grid(a), grid(b)], 1.0).values.any()
    assert compute_dynamic_mask([grid(a), grid(b), grid(a), grid(b)], 0.999).values.all()


def ndsm_case(diff):
    dsm = grid(np.full((3, 3), 100.0 + diff))
    dtm = grid(np.full((3, 3), 100.0))
    return compute_ndsm(dsm, dtm, np.ones((3, 3), bool))


def test_ndsm_thresholds():
    assert np.all(ndsm_case(2.0)[0].values == 0)
    assert np.all(ndsm_case(35.0)[0].values == 0)
    assert np.all(ndsm_case(10.0)[0].values == 10.0)
    assert np.all(ndsm_case(3.0)[0].values == 3.0)
    assert np.all(ndsm_case(30.0)[0].values == 30.0)
    assert np.all(ndsm_case(2.999)[0].values == 0)
    assert np.all(ndsm_case(30.001)[0].values == 0)


def test_ndsm_mask_and_nodata():
    dsm = np.full((2, 2), 110.0)
    dsm[0, 0] = np.nan
    mask = np.array([[True, True], [False, True]])
    out, frac = compute_ndsm(grid(dsm), grid(np.full((2, 2), 100.0)), mask)
    np.testing.assert_array_equal(out.values, [[0.0, 10.0], [0.0, 10.0]])
    assert frac == 0.25


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 80), min_size=16, max_size=16),
       st.floats(0, 5), st.floats(10, 40))
def test_ndsm_range_property(heights, hmin, hmax):
    dsm = grid(np.reshape(heights, (4, 4)))
    out, _ = compute_ndsm(dsm, grid(np.zeros((4, 4))), np.ones((4, 4), bool), hmin, hmax)
    v = out.values.ravel()
    assert np.all((v == 0) | ((v >= hmin) & (v <= hmax)))


def test_volume_closed_forms():
    assert integrate_volume(grid(np.zeros((5, 5)))) == 0.0
    assert integrate_volume(grid(np.full((10, 10), 2.0))) == 200.0
    assert integrate_volume(grid(np.full((10, 10), 2.0), gsd=0.5)) == 50.0


def test_gaussian_pile_volume():
    pile = synth.Pile(0.0, 0.0, 20.0, 30.0)
    world = synth.SyntheticWorld(0, (300.0, 300.0), (pile,), base_height=0.0)
    v = integrate_volume(sampled(world, 1.0))
    fine = world.truncated_volume(hmin=0.0, hmax=np.inf, cell=0.1)
    assert 2 * np.pi * 20 * 30 ** 2 == pytest.approx(113097.34, abs=0.01)
    assert v == pytest.approx(113097.34, rel=0.005)
    assert v == pytest.approx(fine, rel=0.005)


def test_volume_additive_over_disjoint_masks():
    rng = np.random.default_rng(0)
    h = np.round(rng.uniform(3, 30, (40, 40)) * 4) / 4
    dsm, dtm = grid(h), grid(np.zeros((40, 40)))
    m1 = rng.random((40, 40)) < 0.5
    m2 = ~m1 & (rng.random((40, 40)) < 0.5)
    v = [integrate_volume(compute_ndsm(dsm, dtm, m)[0]) for m in (m1, m2, m1 | m2)]
    assert v[0] + v[1] == v[2]


def test_volume_gsd_resampling():
    world = synth.generate_world(4, 3, (300.0, 300.0))
    vols = []
    for gsd in (1.0, 0.5):
        dsm = sampled(world, gsd)
        dtm = dsm.with_values(np.full(dsm.values.shape, world.base_height))
        vols.append(integrate_volume(compute_ndsm(dsm, dtm, np.ones(dsm.values.shape,
                                                                     bool))[0]))
    assert vols[0] == pytest.approx(vols[1], rel=0.02)
    assert vols[1] == pytest.approx(world.truncated_volume(), rel=0.02)


def test_regression_exact_identity():
    d = daily(10)
    v = [1e6 * (1 + 0.3 * k) for k in range(10)]
    reg, _ = fit_weight_regression(list(zip(d, v)), list(zip(d, [x / 1e6 for x in v])))
    assert reg.a == pytest.approx(1.0, abs=1e-12) and abs(reg.b) < 1e-12


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_regression_noiseless_affine(seed):
    d = daily(12)
    rng = np.random.default_rng(seed)
    v = rng.uniform(1e6, 9e6, 12)
    s = 0.9 * v / 1e6 + 2.0
    reg, samples = fit_weight_regression(list(zip(d, v)), list(zip(d, s)), seed=seed)
    assert reg.a == pytest.approx(0.9, abs=1e-10) and reg.b == pytest.approx(2.0, abs=1e-10)
    for smp in samples:
        if smp.train:
            assert predict_weight(reg, smp.volume_m3) == pytest.approx(smp.weight_mt,
                                                                       abs=1e-10)


def test_regression_synthetic_noise():
    d = [date(2022, 1, 1) + timedelta(days=10 * k) for k in range(8)]
    rng = np.random.default_rng(5)
    v = rng.uniform(2e6, 8e6, 8)
    w = synth.weights_from_volumes(d, v, sigma=0.05, seed=6)
    reg, samples = fit_weight_regression(VolumeSeries(d, list(v)), w, 0.85, seed=0)
    assert reg.a == pytest.approx(1.02, rel=0.02)
    test = [s for s in samples if not s.train]
    res = [abs(s.weight_mt - predict_weight(reg, s.volume_m3)) for s in test]
    assert test and max(res) < 3 * 0.05
    assert reg.n_train == round(0.85 * len(samples))


def test_regression_deterministic_split():
    d = daily(20)
    v = np.linspace(1e6, 5e6, 20)
    w = synth.weights_from_volumes(d, v, seed=1)
    a, sa = fit_weight_regression(list(zip(d, v)), w, seed=3)
    b, sb = fit_weight_regression(list(zip(d, v)), w, seed=3)
    assert a == b and sa == sb


def test_regression_errors():
    d = daily(3)
    with pytest.raises(InsufficientDataError):
        fit_weight_regression(list(zip(d, [1.0, 2.0, 3.0])), list(zip(d, [1.0, 2.0, 3.0])))
    d = daily(6)
    with pytest.raises(RegressionError):
        fit_weight_regression(list(zip(d, [5e6] * 6)), list(zip(d, range(6))))


def test_interpolation_union_of_dates():
    vol = [(date(2022, 1, 1), 0.0), (date(2022, 1, 11), 10.0)]
    wt = [(date(2021, 12, 30), 1.0), (date(2022, 1, 6), 2.0), (date(2022, 1, 20), 3.0)]
    out = interpolate_series(vol, wt)
    assert [o[0] for o in out] == [date(2022, 1, 1), date(2022, 1, 6), date(2022, 1, 11)]
    assert out[1][1] == 5.0
    assert out[0][2] == pytest.approx(1 + 2 / 7)


def test_predict_weight():
    unit = WeightRegression(1.0, 0.0, 0, 0, 1, 0, 1, 0)
    assert predict_weight(unit, 5e6) == 5.0
    reg = WeightRegression(1.02, 0.3, 0, 0, 1, 0, 1, 0)
    assert predict_weight(reg, 10e6) == pytest.approx(10.5)


def test_volume_series_invariants():
    with pytest.raises(ValueError):
        VolumeSeries([date(2022, 1, 2), date(2022, 1, 1)], [1.0, 2.0])
    with pytest.raises(ValueError):
        VolumeSeries([date(2022, 1, 1)], [-1.0])


def test_reports(tmp_path):
    d = daily(6)
    v = np.linspace(1e6, 3e6, 6)
    write_volume_report(str(tmp_path / "v.csv"), d, v, [0.0] * 6)
    assert (tmp_path / "v.csv").read_text().splitlines()[0] == "date,volume_m3,ndata_fraction"
    w = list(zip(d, 2 * v / 1e6))
    reg, samples = fit_weight_regression(list(zip(d, v)), w)
    write_regression_report(str(tmp_path / "r.csv"), str(tmp_path / "r.json"), reg, samples)
    import json
    rec = json.loads((tmp_path / "r.json").read_text())
    assert set(rec) == {"a", "b", "rms_train", "rms_test", "train_fraction", "seed"}
    synth.write_weights(str(tmp_path / "w.csv"), w)
    assert read_weights(str(tmp_path / "w.csv")) == w
