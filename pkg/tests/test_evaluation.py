import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import transport_lp, w1_assignment_bruteforce
from usbridge.data import Snapshot, TimeSeriesDataset
from usbridge.evaluation import (EvalReport, ProtocolError, evaluate_model, growth_correlation, hold_one_out,
                                 rme, w1)
from usbridge.inference import WeightedCloud


def _cloud(points, weights=None):
    points = np.atleast_2d(np.asarray(points, float))
    w = np.ones(len(points)) if weights is None else np.asarray(weights, float)
    return WeightedCloud(points, np.log(w), 0.0)


def test_w1_trivial():
    a = _cloud(np.random.default_rng(0).normal(size=(20, 3)))
    assert w1(a, a) == pytest.approx(0.0, abs=1e-12)
    assert w1(_cloud([[0.0, 0.0]]), _cloud([[3.0, 0.0]])) == pytest.approx(3.0)


@pytest.mark.parametrize("seed", range(5))
def test_w1_matches_lp_oracle(seed):
    rng = np.random.default_rng(seed)
    xa, xb = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    wa, wb = rng.uniform(0.1, 1, 3), rng.uniform(0.1, 1, 3)
    M = np.linalg.norm(xa[:, None] - xb[None], axis=-1)
    expect = transport_lp(wa / wa.sum(), wb / wb.sum(), M)
    assert w1((xa, wa), (xb, wb)) == pytest.approx(expect, abs=1e-6)


def test_w1_uniform_matches_assignment():
    rng = np.random.default_rng(7)
    x, y = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    assert w1((x, np.ones(5)), (y, np.ones(5))) == pytest.approx(w1_assignment_bruteforce(x, y), abs=1e-9)


@given(st.integers(0, 2**32 - 1))
def test_w1_metric_axioms(seed):
    rng = np.random.default_rng(seed)
    c = [(rng.normal(size=(int(rng.integers(2, 8)), 2)), rng.uniform(0.1, 1, 8)) for _ in range(3)]
    c = [(x, w[: len(x)]) for x, w in c]
    assert w1(c[0], c[1]) == pytest.approx(w1(c[1], c[0]), abs=1e-9)
    assert w1(c[0], c[2]) <= w1(c[0], c[1]) + w1(c[1], c[2]) + 1e-6


@given(st.floats(1e-3, 1e3), st.integers(0, 2**32 - 1))
def test_w1_normalization_invariance(scale, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(4, 2)), rng.normal(size=(6, 2))
    wx, wy = rng.uniform(0.1, 1, 4), rng.uniform(0.1, 1, 6)
    assert w1((x, scale * wx), (y, wy)) == pytest.approx(w1((x, wx), (y, wy)), rel=1e-9, abs=1e-12)


def test_w1_entropic_regime_close_to_exact():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(40, 2)), rng.normal(0.5, 1, size=(50, 2))
    exact = w1((x, np.ones(40)), (y, np.ones(50)))
    approx, info = w1((x, np.ones(40)), (y, np.ones(50)), exact_threshold=100, return_info=True)
    assert info["solver"] == "entropic" and info["eps"] > 0
    assert approx == pytest.approx(exact, rel=0.02)


def test_w1_empty_cloud():
    with pytest.raises(ValueError):
        w1((np.zeros((0, 2)), np.zeros(0)), (np.zeros((1, 2)), np.ones(1)))


def test_rme():
    assert rme(1.0, 1.0) == 0.0
    assert rme(1.1, 1.0) == pytest.approx(0.1)
    assert rme(_cloud(np.zeros((1400, 1))), 1400.0) == 0.0
    with pytest.raises(ValueError):
        rme(1.0, 0.0)


@given(st.floats(0.01, 10), st.floats(0.1, 10), st.floats(0.1, 10))
def test_rme_scale_law(c, mp, mt):
    assert rme(c * mp, mt) == pytest.approx(abs(c * mp - mt) / mt, rel=1e-12)


class _Lin:
    def __init__(self, coef):
        self.coef = coef

    def growth(self, x, t):
        return x @ self.coef


def test_growth_correlation():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(30, 2))
    m = _Lin(np.array([1.0, -2.0]))
    g = m.growth(x, 0)
    assert growth_correlation(m, x, 3 * g + 1) == pytest.approx(1.0)
    assert growth_correlation(m, x, -g) == pytest.approx(-1.0)
    assert np.isnan(growth_correlation(m, x, np.ones(30)))
    with pytest.raises(ValueError):
        growth_correlation(m, x, np.ones(29))


class _Still:
    """Model that keeps every particle still; growth is a constant rate."""

    dim = 1
    nu = 0.0

    def __init__(self, rate=0.0):
        self.rate = rate

    def drift(self, x, t):
        return np.zeros_like(x)

    score = drift

    def growth(self, x, t):
        return np.full(len(x), self.rate)


def _three():
    pts = np.array([[0.0], [1.0]])
    return TimeSeriesDataset([Snapshot(0.0, pts, [1, 1]), Snapshot(1.0, pts + 1, [1, 1]),
                              Snapshot(2.0, pts, [2, 2])])


def test_evaluate_model_rows_and_rates():
    ds = _three()
    rep = evaluate_model(_Still(np.log(2) / 2), ds, dt=0.01, standardize=False)
    assert rep.times == [1.0, 2.0]
    assert rep.w1[0] == pytest.approx(1.0) and rep.w1[1] == pytest.approx(0.0, abs=1e-12)
    assert rep.rme[1] == pytest.approx(0.0, abs=1e-12)


def test_hold_one_out_uses_midpoint():
    ds = _three()

    class Res:
        model = _Still(np.log(2))

    seen = {}

    def fake_train(reduced, config):
        seen["times"] = reduced.original_times
        return Res()

    rep = hold_one_out(ds, {"x": 1}, 1, dt=0.01, standardize=False, train_fn=fake_train)
    assert seen["times"] == [0.0, 2.0]
    assert len(rep.w1) == 1
    # evaluated at internal time 0.5: mass 2 * 2^0.5 against the held-out 2
    assert rep.rme[0] == pytest.approx(np.sqrt(2) - 1, rel=1e-9)


@pytest.mark.parametrize("i", [0, 2, 5])
def test_hold_one_out_protocol_errors(i):
    with pytest.raises(ProtocolError):
        hold_one_out(_three(), {}, i, train_fn=lambda *a: None)


def test_report_files(tmp_path):
    rep = EvalReport([1.0, 2.0], [0.1, 0.2], [0.0, 0.1], 0.15, 0.05, seed=3)
    rep.to_json(tmp_path / "r.json")
    rep.to_csv(tmp_path / "r.csv")
    assert json.loads((tmp_path / "r.json").read_text())["mean_w1"] == 0.15
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[0] == "time,w1,rme" and rows[-1].startswith("mean,")
