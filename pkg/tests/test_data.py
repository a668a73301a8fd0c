import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from usbridge.data import (DataFormatError, SimGeneParams, Snapshot, TimeSeriesDataset, gen_gaussian_mixture,
                           gen_sim_gene, load_snapshots, save_snapshots, sim_gene_growth)


def _ds():
    return TimeSeriesDataset([
        Snapshot(0.0, [[0.0, 1.0], [2.0, 3.0]], [1.0, 2.0]),
        Snapshot(2.0, [[1.0, 1.0]], [4.0]),
        Snapshot(6.0, [[5.0, 5.0], [6.0, 6.0]], [1.0, 1.0]),
    ], {"note": "x"})


def test_roundtrip_is_exact(tmp_path):
    ds = _ds()
    save_snapshots(ds, tmp_path / "a.csv")
    back = load_snapshots(tmp_path / "a.csv")
    assert back.original_times == ds.original_times
    assert back.metadata == {"note": "x"}
    for a, b in zip(ds.snapshots, back.snapshots):
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(a.weights, b.weights)


@given(arrays(np.float64, (6, 3), elements=st.floats(-1e6, 1e6, allow_nan=False)),
       arrays(np.float64, 6, elements=st.floats(1e-6, 1e3)))
def test_roundtrip_property(tmp_path_factory, pts, w):
    ds = TimeSeriesDataset([Snapshot(0.0, pts[:3], w[:3]), Snapshot(1.5, pts[3:], w[3:])])
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    save_snapshots(ds, path)
    back = load_snapshots(path)
    for a, b in zip(ds.snapshots, back.snapshots):
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(a.weights, b.weights)


def test_time_maps():
    ds = _ds()
    assert ds.internal_times == [0, 1, 2]
    assert ds.to_internal(4.0) == pytest.approx(1.5)
    assert ds.to_original(0.5) == pytest.approx(1.0)
    assert ds.to_original(ds.to_internal(5.3)) == pytest.approx(5.3)


def test_drop_merges_interval():
    ds = _ds().drop(1)
    assert ds.original_times == [0.0, 6.0]
    assert ds.to_internal(2.0) == pytest.approx(1 / 3)


def test_masses():
    assert [s.mass for s in _ds().snapshots] == [3.0, 4.0, 2.0]


@pytest.mark.parametrize("text", [
    "time,x0,weight\n0,1.0,1\n0,2.0\n1,1,1\n",      # ragged row
    "time,x0,weight\n0,1.0,-1\n1,1,1\n",            # negative weight
    "time,x0,weight\n0,1.0,1\n0,2.0,1\n",           # one time only
    "t,x0,w\n0,1,1\n1,1,1\n",                       # bad header
    "time,x0,weight\n0,abc,1\n1,1,1\n",             # non-numeric
    "",                                             # empty
])
def test_malformed_csv(tmp_path, text):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(DataFormatError):
        load_snapshots(p)


def test_snapshot_validation():
    with pytest.raises(DataFormatError):
        Snapshot(0.0, [[1.0]], [0.0])
    with pytest.raises(DataFormatError):
        Snapshot(0.0, [[np.nan]], [1.0])
    with pytest.raises(DataFormatError):
        TimeSeriesDataset([Snapshot(1.0, [[0.0]], [1.0]), Snapshot(0.0, [[0.0]], [1.0])])
    with pytest.raises(DataFormatError):
        TimeSeriesDataset([Snapshot(0.0, [[0.0]], [1.0]), Snapshot(1.0, [[0.0, 1.0]], [1.0])])


def test_sim_gene_shape_and_determinism():
    a = gen_sim_gene(seed=7)
    b = gen_sim_gene(seed=7)
    assert a.original_times == [0.0, 8.0, 16.0, 24.0, 32.0]
    assert a.dim == 2
    assert len(a.snapshots[0]) == 400
    counts = [len(s) for s in a.snapshots]
    assert counts == sorted(counts)
    assert a.content_hash() == b.content_hash()
    assert gen_sim_gene(seed=8).content_hash() != a.content_hash()
    assert all(np.all(s.points >= 0) for s in a.snapshots)


def test_sim_gene_growth_formula():
    # alpha_g X2^2 / (1 + X2^2) at X2 = 1 and the large-X2 limit
    assert sim_gene_growth(1.0, 2.0) == pytest.approx(1.0)
    assert sim_gene_growth(1e6, 2.0) == pytest.approx(2.0)
    assert sim_gene_growth(0.0, 2.0) == 0.0


def test_sim_gene_params_validation():
    with pytest.raises(ValueError):
        gen_sim_gene(SimGeneParams(dt=0.0))
    with pytest.raises(ValueError):
        gen_sim_gene(SimGeneParams(record_times=(0.0, 0.0)))


def test_gaussian_counts():
    ds = gen_gaussian_mixture(seed=0, dim=10)
    assert [len(s) for s in ds.snapshots] == [500, 1400]
    assert ds.dim == 10
    x1 = ds.snapshots[1].points
    # the lower cluster has split into left and right halves
    lower = x1[x1[:, 1] < 0]
    assert len(lower) == 400
    assert np.sum(lower[:, 0] < 0) == 200
