import numpy as np
import pytest

from usbridge.bridge import (BridgeBatch, marginal_targets_oracle, pb_bridge_spec, sample_pb_bridge,
                             score_weight)
from usbridge.data import Snapshot, TimeSeriesDataset, gen_gaussian_mixture
from usbridge.ndnum import NumericError
from usbridge.training import (ModelFormatError, ModelTriple, TrainConfig, build_couplings, cusm_loss,
                               draw_training_batch, load_model, save_model, train, write_loss_log)


def _tiny_dataset(seed=0):
    rng = np.random.default_rng(seed)
    snaps = [Snapshot(float(t), rng.normal(t, 0.3, (15 + 3 * t, 2)), np.ones(15 + 3 * t)) for t in range(3)]
    return TimeSeriesDataset(snaps)


def _tiny_config(**kw):
    base = dict(epochs=15, batch_per_pair=16, hidden_width=8, depth=3, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def _batch(rng, n=12, d=2, nu=0.3):
    x0, x1 = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    t = rng.uniform(0.05, 0.95, n)
    return sample_pb_bridge(x0, x1, 1.0, rng.uniform(0.5, 2, n), nu, t, rng=rng), t


def test_cusm_gradient_matches_finite_differences(rng):
    model = ModelTriple.create(2, 0.3, rng, hidden_width=6, depth=3)
    # give the zero-initialised heads some weight so every path is exercised
    for net in (model.g_params, model.s_params):
        net[-2][...] = rng.normal(0, 0.3, net[-2].shape)
    batch, t = _batch(rng)
    _, _, grads = cusm_loss(model, batch, t)
    h = 1e-6
    for which in range(3):
        params = model.params[which]
        for p, gp in zip(params, grads[which]):
            idx = tuple(rng.integers(s) for s in p.shape)
            old = p[idx]
            p[idx] = old + h
            fp = cusm_loss(model, batch, t, with_grad=False)[0]
            p[idx] = old - h
            fm = cusm_loss(model, batch, t, with_grad=False)[0]
            p[idx] = old
            assert gp[idx] == pytest.approx((fp - fm) / (2 * h), rel=1e-4, abs=1e-8)


def test_loss_parts_sum(rng):
    model = ModelTriple.create(2, 0.3, rng, hidden_width=6, depth=2)
    batch, t = _batch(rng)
    loss, parts, _ = cusm_loss(model, batch, t, with_grad=False)
    assert loss == pytest.approx(parts["loss_v"] + parts["loss_g"] + parts["loss_s"])


def test_loss_zero_on_exact_targets(rng):
    # a depth-1 network can represent a single constant-drift, constant-growth bridge
    model = ModelTriple.create(1, 1.0, rng, hidden_width=2, depth=1)
    n = 5
    x0, x1 = np.zeros((n, 1)), np.full((n, 1), 2.0)
    batch = sample_pb_bridge(x0, x1, 1.0, np.e, 1e-12, 0.5, eps=np.zeros((n, 1)))
    model.v_params = [np.zeros((2, 1)), np.array([2.0])]
    model.g_params = [np.zeros((2, 1)), np.array([1.0])]
    loss, _, _ = cusm_loss(model, batch, np.full(n, 0.5), with_grad=False)
    assert loss == pytest.approx(0.0, abs=1e-20)


def test_nonfinite_loss_names_sample(rng):
    model = ModelTriple.create(2, 0.3, rng, hidden_width=4, depth=2)
    batch, t = _batch(rng)
    batch.u_target[3, 0] = np.inf
    with pytest.raises(NumericError, match="sample 3"):
        cusm_loss(model, batch, t)


def test_training_batch_layout(rng):
    ds = _tiny_dataset()
    cfg = _tiny_config()
    couplings = build_couplings(ds, cfg, rng)
    batch, gt = draw_training_batch(ds, couplings, cfg, rng)
    assert len(batch) == 2 * cfg.batch_per_pair
    # interval k uses global time k + t
    assert np.all((gt[:16] > 0) & (gt[:16] < 1))
    assert np.all((gt[16:] > 1) & (gt[16:] < 2))
    np.testing.assert_allclose(gt - np.floor(gt), batch.t)


def test_train_is_deterministic():
    ds = _tiny_dataset()
    a = train(ds, _tiny_config())
    b = train(ds, _tiny_config())
    assert a.loss_log == b.loss_log
    c = train(ds, _tiny_config(seed=4))
    assert c.loss_log != a.loss_log


def test_train_reduces_loss():
    ds = gen_gaussian_mixture(seed=0, dim=2)
    res = train(ds, TrainConfig(epochs=200, batch_per_pair=128, hidden_width=32, depth=3,
                                learning_rate=3e-3, nu=0.1))
    first = np.mean([r[1] for r in res.loss_log[:20]])
    last = np.mean([r[1] for r in res.loss_log[-20:]])
    assert last < 0.7 * first


def test_provenance():
    ds = _tiny_dataset()
    res = train(ds, _tiny_config())
    p = res.model.provenance
    assert p["data_hash"] == ds.content_hash()
    assert p["original_times"] == [0.0, 1.0, 2.0]
    assert p["config"]["hidden_width"] == 8


@pytest.mark.parametrize("bad", [dict(delta=0.0), dict(nu=-1.0), dict(epochs=0), dict(t_floor=0.6),
                                 dict(coupling="greedy"), dict(eps_entropic=0.0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        _tiny_config(**bad).validate()


def test_model_roundtrip(tmp_path, rng):
    ds = _tiny_dataset()
    model = train(ds, _tiny_config()).model
    save_model(model, tmp_path / "m.npz")
    back = load_model(tmp_path / "m.npz")
    x = rng.normal(size=(7, 2))
    for f in ("drift", "growth", "score"):
        np.testing.assert_array_equal(getattr(model, f)(x, 0.4), getattr(back, f)(x, 0.4))
    assert back.provenance == model.provenance


def test_corrupt_model_file(tmp_path):
    p = tmp_path / "bad.npz"
    p.write_bytes(b"not a zip")
    with pytest.raises(ModelFormatError):
        load_model(p)
    np.savez(tmp_path / "other.npz", a=np.zeros(2))
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "other.npz")


def test_loss_log_file(tmp_path):
    write_loss_log([(1, 0.5, 0.1, 0.2, 0.2)], tmp_path / "l.csv")
    assert (tmp_path / "l.csv").read_text().splitlines() == ["step,loss,loss_v,loss_g,loss_s",
                                                            "1,0.5,0.1,0.2,0.2"]


def _zero_last_layers(model):
    for net in model.params:
        net[-1][...] = 0.0
        net[-2][...] = 0.0


def test_zero_model_loss_equals_dimension(rng):
    d, n = 3, 20_000
    model = ModelTriple.create(d, 1e-12, rng, hidden_width=4, depth=2)
    _zero_last_layers(model)
    x0 = rng.normal(size=(n, d))
    t = rng.uniform(0.05, 0.95, n)
    batch = sample_pb_bridge(x0, x0, 1.0, 1.0, 1e-12, t, rng=rng)
    loss, parts, _ = cusm_loss(model, batch, t, with_grad=False)
    # E|eps|^2 = d with standard deviation sqrt(2d / n) for the mean
    assert loss == pytest.approx(d, abs=3 * np.sqrt(2 * d / n))
    assert parts["loss_v"] < 1e-18 and parts["loss_g"] == 0.0


def test_loss_linear_in_mass_weight(rng):
    model = ModelTriple.create(2, 0.3, rng, hidden_width=6, depth=3)
    batch, t = _batch(rng)
    loss, _, grads = cusm_loss(model, batch, t)
    batch.mass_weight = 2.0 * batch.mass_weight
    loss2, _, grads2 = cusm_loss(model, batch, t)
    assert loss2 == 2.0 * loss
    for a, b in zip(grads, grads2):
        for ga, gb in zip(a, b):
            np.testing.assert_array_equal(gb, 2.0 * ga)


def test_loss_additive_over_intervals(rng):
    model = ModelTriple.create(2, 0.3, rng, hidden_width=6, depth=2)
    (b1, t1), (b2, t2) = _batch(rng, n=10), _batch(rng, n=6)
    g1, g2 = t1, 1.0 + t2
    l1 = cusm_loss(model, b1, g1, with_grad=False)[0]
    l2 = cusm_loss(model, b2, g2, with_grad=False)[0]
    both = BridgeBatch.concat([b1, b2])
    total = cusm_loss(model, both, np.concatenate([g1, g2]), with_grad=False)[0]
    assert total == pytest.approx((10 * l1 + 6 * l2) / 16, rel=1e-13)


def _dirac_pair(x1, m1):
    return TimeSeriesDataset([Snapshot(0.0, np.array([[0.0, 0.0]]), np.array([1.0])),
                              Snapshot(1.0, np.array([x1]), np.array([m1]))])


def test_two_dirac_loss_and_growth():
    res = train(_dirac_pair([1.0, 0.0], np.e),
                TrainConfig(epochs=500, batch_per_pair=256, hidden_width=32, depth=3,
                            learning_rate=1e-2, nu=0.1, delta=5.0, seed=0))
    losses = [row[1] for row in res.loss_log]
    assert np.mean(losses[-20:]) < 0.1 * losses[0]
    t = np.linspace(0.1, 0.9, 9)
    path = np.column_stack([t, np.zeros_like(t)])
    np.testing.assert_allclose(res.model.growth(path, t), 1.0, atol=0.03)


def test_identical_diracs_learn_still_fields():
    res = train(_dirac_pair([0.0, 0.0], 1.0),
                TrainConfig(epochs=300, batch_per_pair=256, hidden_width=32, depth=3,
                            learning_rate=1e-2, nu=0.1, delta=50.0, seed=1))
    t = np.linspace(0.1, 0.9, 9)
    here = np.zeros((9, 2))
    assert np.max(np.abs(res.model.growth(here, t))) < 0.02
    assert np.max(np.linalg.norm(res.model.drift(here, t), axis=1)) < 0.1


def test_conditional_gradient_matches_marginal_gradient():
    # two conditions with overlapping bridges; the marginal targets come from
    # the closed-form mixture oracle evaluated at the same samples
    rng = np.random.default_rng(11)
    nu = 0.6
    ends = [(np.array([0.0, 0.0]), np.array([1.0, 0.5]), 1.5),
            (np.array([0.3, -0.2]), np.array([0.2, 1.0]), 0.6)]
    q = np.array([0.4, 0.6])
    conditions = [(qz, pb_bridge_spec(a, b, 1.0, m, nu)) for qz, (a, b, m) in zip(q, ends)]
    model = ModelTriple.create(2, nu, rng, hidden_width=5, depth=2)
    for net in (model.g_params, model.s_params):
        net[-2][...] = rng.normal(0, 0.3, net[-2].shape)
    n_chunks, chunk = 50, 2000
    diffs = []
    for _ in range(n_chunks):
        z = rng.choice(2, chunk, p=q)
        t = rng.uniform(0.05, 0.95, chunk)
        x0 = np.stack([ends[k][0] for k in z])
        x1 = np.stack([ends[k][1] for k in z])
        m1 = np.array([ends[k][2] for k in z])
        cond = sample_pb_bridge(x0, x1, 1.0, m1, nu, t, rng=rng)
        marg = BridgeBatch.concat([cond])
        for i in range(chunk):
            mt = marginal_targets_oracle(conditions, t[i], cond.x[i])
            marg.u_target[i] = mt.u
            marg.g_target[i] = mt.g
            marg.eps_target[i] = -score_weight(t[i], nu) * mt.s
        gc = cusm_loss(model, cond, t)[2]
        gm = cusm_loss(model, marg, t)[2]
        diffs.append(np.concatenate([np.concatenate([a.ravel() - b.ravel() for a, b in zip(x, y)])
                                     for x, y in zip(gc, gm)]))
    diffs = np.array(diffs)
    mean = diffs.mean(axis=0)
    se = diffs.std(axis=0, ddof=1) / np.sqrt(n_chunks)
    # a handful of fixed directions, each within 3 standard errors
    dirs = np.random.default_rng(0).normal(size=(6, diffs.shape[1]))
    proj = diffs @ dirs.T
    z = proj.mean(axis=0) / (proj.std(axis=0, ddof=1) / np.sqrt(n_chunks))
    assert np.all(np.abs(z) < 3), z
    assert np.all(se > 0) and mean.shape == se.shape
