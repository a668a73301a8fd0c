"""Distribution metrics and the evaluation protocols built on them."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .data import Snapshot, TimeSeriesDataset
from .inference import WeightedCloud, continuous_trajectory

log = logging.getLogger(__name__)

EXACT_THRESHOLD = 4_000_000
ENTROPIC_FACTOR = 0.005


class ProtocolError(ValueError):
    pass


def _ot():
    # POT probes every installed deep-learning backend on import; skip that
    for name in ("TENSORFLOW", "PYTORCH", "JAX", "CUPY"):
        os.environ.setdefault(f"POT_BACKEND_DISABLE_{name}", "1")
    import ot

    return ot


def _as_cloud(c):
    if isinstance(c, WeightedCloud):
        return c.points, c.weights
    if isinstance(c, Snapshot):
        return c.points, c.weights
    pts, w = c
    return np.atleast_2d(np.asarray(pts, dtype=np.float64)), np.asarray(w, dtype=np.float64)


def w1(cloud_a, cloud_b, exact_threshold=EXACT_THRESHOLD, return_info=False):
    """1-Wasserstein distance between two normalized weighted clouds.

    Clouds may be WeightedCloud, Snapshot or ``(points, weights)`` pairs.
    Exact network simplex up to ``exact_threshold`` cost entries, otherwise
    entropic OT with ``eps = 0.005 * median distance`` (no debiasing).
    """
    xa, wa = _as_cloud(cloud_a)
    xb, wb = _as_cloud(cloud_b)
    if len(xa) == 0 or len(xb) == 0:
        raise ValueError("W1 of an empty cloud is undefined")
    if not (wa.sum() > 0 and wb.sum() > 0):
        raise ValueError("W1 needs positive total masses")
    a = wa / wa.sum()
    b = wb / wb.sum()
    M = cdist(xa, xb)
    ot = _ot()
    info = {"solver": "exact", "eps": None}
    if M.size <= exact_threshold:
        val = float(ot.emd2(a, b, M, numItermax=10_000_000))
    else:
        eps = ENTROPIC_FACTOR * float(np.median(M))
        info = {"solver": "entropic", "eps": eps}
        plan = ot.sinkhorn(a, b, M, eps, method="sinkhorn_log", numItermax=20_000, stopThr=1e-9)
        val = float(np.sum(plan * M))
    val = max(val, 0.0)
    return (val, info) if return_info else val


def _mass(c):
    if isinstance(c, (WeightedCloud, Snapshot)):
        return c.mass
    return float(np.sum(c))


def rme(cloud_pred, cloud_true) -> float:
    """Relative mass error ``|m_pred - m_true| / m_true``.

    Either argument may be a cloud, a snapshot, or a plain mass (or count).
    """
    mp = _mass(cloud_pred)
    mt = _mass(cloud_true)
    if not mt > 0:
        raise ValueError("true mass must be positive")
    return abs(mp - mt) / mt


def growth_correlation(model, probe, true_g, t=None) -> float:
    """Pearson correlation of the learned growth rate with a reference.

    Returns NaN when either side has zero variance.
    """
    pts = probe.points if isinstance(probe, Snapshot) else np.atleast_2d(probe)
    true_g = np.asarray(true_g, dtype=np.float64).reshape(-1)
    if true_g.shape[0] != pts.shape[0]:
        raise ValueError("true_g must have one entry per probe point")
    if t is None:
        t = getattr(probe, "time", 0.0)
    pred = model.growth(pts, t)
    if np.std(pred) == 0 or np.std(true_g) == 0:
        return float("nan")
    return float(np.corrcoef(pred, true_g)[0, 1])


@dataclass
class EvalReport:
    times: list
    w1: list
    rme: list
    mean_w1: float
    mean_rme: float
    growth_pearson: float | None = None
    runtime: float = 0.0
    config_hash: str = ""
    seed: int | None = None
    w1_solver: list = field(default_factory=list)
    kind: str = "fit"

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "w1", "rme"])
            for t, a, b in zip(self.times, self.w1, self.rme):
                w.writerow([repr(float(t)), repr(float(a)), repr(float(b))])
            w.writerow(["mean", repr(float(self.mean_w1)), repr(float(self.mean_rme))])


def config_hash(config) -> str:
    d = asdict(config) if hasattr(config, "__dataclass_fields__") else dict(config)
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


def simulate_from_start(model, dataset: TimeSeriesDataset, internal_times, dt=0.01, seed=0):
    """Continuous inference from the first snapshot, recorded at internal times."""
    s0 = dataset.snapshots[0]
    rng = np.random.default_rng(seed)
    end = max(internal_times)
    return continuous_trajectory(model, s0.points, (0.0, end), dt, rng,
                                 record_times=internal_times, start_weights=s0.weights)


def _standardizer(dataset, standardize):
    if not standardize:
        return lambda p: p
    mean, scale = dataset.pooled_stats()
    return lambda p: (p - mean) / scale


def compare(pred_clouds, true_snaps, transform, exact_threshold=EXACT_THRESHOLD):
    ws, rs, solvers = [], [], []
    for c, s in zip(pred_clouds, true_snaps):
        val, info = w1((transform(c.points), c.weights), (transform(s.points), s.weights),
                       exact_threshold, return_info=True)
        ws.append(val)
        rs.append(rme(c, s))
        solvers.append(info)
    return ws, rs, solvers


def evaluate_model(model, dataset: TimeSeriesDataset, dt=0.01, seed=0, standardize=True,
                   exact_threshold=EXACT_THRESHOLD, config=None) -> EvalReport:
    """Simulate from the first snapshot and score every later snapshot."""
    start = time.perf_counter()
    times = [float(k) for k in dataset.internal_times[1:]]
    clouds = simulate_from_start(model, dataset, times, dt, seed)
    ws, rs, solvers = compare(clouds, dataset.snapshots[1:], _standardizer(dataset, standardize),
                              exact_threshold)
    return EvalReport(dataset.original_times[1:], ws, rs, float(np.mean(ws)), float(np.mean(rs)),
                      runtime=time.perf_counter() - start,
                      config_hash=config_hash(config) if config is not None else "",
                      seed=seed, w1_solver=solvers)


def hold_one_out(dataset: TimeSeriesDataset, config, held_index: int, dt=0.01, seed=0,
                 standardize=True, train_fn=None) -> EvalReport:
    """Train without snapshot ``held_index`` and score W1 at its time.

    The merged interval is one unit of the internal clock; the held time
    sits at its original-time fraction within it.
    """
    from .training import train

    K = len(dataset.snapshots) - 1
    if not 1 <= held_index <= K - 1:
        raise ProtocolError(f"held index must be interior (1..{K - 1}), got {held_index}")
    start = time.perf_counter()
    reduced = dataset.drop(held_index)
    held = dataset.snapshots[held_index]
    model = (train_fn or train)(reduced, config).model
    s = reduced.to_internal(held.time)
    (cloud,) = simulate_from_start(model, reduced, [s], dt, seed)
    ws, rs, solvers = compare([cloud], [held], _standardizer(dataset, standardize))
    return EvalReport([held.time], ws, rs, ws[0], rs[0], runtime=time.perf_counter() - start,
                      config_hash=config_hash(config), seed=seed, w1_solver=solvers,
                      kind=f"holdout-{held_index}")


def hold_one_out_all(dataset, config, dt=0.01, seed=0, standardize=True, train_fn=None):
    """Hold out every interior snapshot in turn; returns (reports, mean W1)."""
    reports = [hold_one_out(dataset, config, i, dt, seed, standardize, train_fn)
               for i in range(1, len(dataset.snapshots) - 1)]
    return reports, float(np.mean([r.mean_w1 for r in reports]))
