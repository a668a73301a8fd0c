"""Snapshot datasets, CSV interchange and synthetic generators."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


class DataFormatError(ValueError):
    pass


@dataclass
class Snapshot:
    """Weighted point cloud observed at one time."""

    time: float
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if self.weights.shape[0] != self.points.shape[0]:
            raise DataFormatError("weights and points differ in length")
        if np.any(self.weights < 0):
            raise DataFormatError("negative weight")
        if np.any(np.isnan(self.points)):
            raise DataFormatError("NaN coordinate")
        if not self.weights.sum() > 0:
            raise DataFormatError("snapshot has zero total mass")

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return self.points.shape[0]


@dataclass
class TimeSeriesDataset:
    snapshots: list
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.snapshots) < 2:
            raise DataFormatError("a dataset needs at least 2 snapshots")
        times = [s.time for s in self.snapshots]
        if any(b <= a for a, b in zip(times[:-1], times[1:])):
            raise DataFormatError("snapshot times must be strictly increasing")
        if len({s.dim for s in self.snapshots}) != 1:
            raise DataFormatError("snapshots differ in dimension")

    @property
    def original_times(self) -> list[float]:
        return [s.time for s in self.snapshots]

    @property
    def internal_times(self) -> list[int]:
        return list(range(len(self.snapshots)))

    @property
    def dim(self) -> int:
        return self.snapshots[0].dim

    @property
    def n_intervals(self) -> int:
        return len(self.snapshots) - 1

    def to_internal(self, t: float) -> float:
        """Map an original time onto the piecewise-linear internal clock."""
        return float(np.interp(t, self.original_times, self.internal_times))

    def to_original(self, s: float) -> float:
        return float(np.interp(s, self.internal_times, self.original_times))

    def drop(self, index: int) -> "TimeSeriesDataset":
        snaps = [s for i, s in enumerate(self.snapshots) if i != index]
        return TimeSeriesDataset(snaps, dict(self.metadata))

    def pooled_stats(self):
        """Per-coordinate mean and std over all snapshot points."""
        allp = np.vstack([s.points for s in self.snapshots])
        std = allp.std(axis=0)
        return allp.mean(axis=0), np.where(std > 0, std, 1.0)

    def content_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for s in self.snapshots:
            h.update(np.float64(s.time).tobytes())
            h.update(np.ascontiguousarray(s.points).tobytes())
            h.update(np.ascontiguousarray(s.weights).tobytes())
        return h.hexdigest()[:16]


def load_snapshots(path) -> TimeSeriesDataset:
    """Read ``time,x0,...,x{d-1},weight`` CSV; ``#`` lines carry metadata."""
    path = Path(path)
    metadata = {}
    rows = []
    header = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if ":" in body:
                    key, _, value = body.partition(":")
                    try:
                        metadata[key.strip()] = json.loads(value)
                    except json.JSONDecodeError:
                        metadata[key.strip()] = value.strip()
                continue
            fields = next(csv.reader([line]))
            if header is None:
                header = [f.strip() for f in fields]
                if len(header) < 3 or header[0] != "time" or header[-1] != "weight":
                    raise DataFormatError(f"{path}: header must be time,x0,...,weight")
                continue
            if len(fields) != len(header):
                raise DataFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(fields)}")
            try:
                rows.append([float(f) for f in fields])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
    if header is None or not rows:
        raise DataFormatError(f"{path}: no data rows")
    arr = np.asarray(rows)
    if np.any(arr[:, -1] < 0):
        raise DataFormatError(f"{path}: negative weight")
    times = np.unique(arr[:, 0])
    if len(times) < 2:
        raise DataFormatError(f"{path}: need at least 2 distinct times")
    snaps = [Snapshot(float(t), arr[arr[:, 0] == t, 1:-1], arr[arr[:, 0] == t, -1]) for t in times]
    return TimeSeriesDataset(snaps, metadata)


def _fmt(v: float) -> str:
    return repr(float(v))


def _write_rows(path, header, rows, metadata):
    buf = io.StringIO()
    for key, value in (metadata or {}).items():
        buf.write(f"# {key}: {json.dumps(value, sort_keys=True)}\n")
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(_fmt(v) for v in row) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def save_snapshots(dataset: TimeSeriesDataset, path) -> None:
    if not dataset.snapshots:
        raise DataFormatError("empty dataset")
    d = dataset.dim
    header = ["time"] + [f"x{i}" for i in range(d)] + ["weight"]
    rows = (
        [s.time, *p, w]
        for s in dataset.snapshots
        for p, w in zip(s.points, s.weights)
    )
    _write_rows(path, header, rows, dataset.metadata)


def save_weighted_cloud(cloud, path, metadata=None) -> None:
    """Write a WeightedCloud in the snapshot CSV layout (weight = exp(log_weight))."""
    d = cloud.points.shape[1]
    header = ["time"] + [f"x{i}" for i in range(d)] + ["weight"]
    w = np.exp(cloud.log_weights)
    rows = ([cloud.time, *p, wi] for p, wi in zip(cloud.points, w))
    _write_rows(path, header, rows, metadata)


# ---------------------------------------------------------------- generators


@dataclass
class SimGeneParams:
    """Constants of the three-gene toggle-switch simulator.

    The defaults are tunables picked to give a visible two-branch structure;
    they are not published ground truth.
    """

    alpha: tuple = (1.0, 1.0, 0.2)
    beta: float = 0.3
    gamma: tuple = (1.0, 1.0, 1.0)
    delta: tuple = (0.3, 0.3, 0.3)
    eta: tuple = (0.05, 0.05, 0.05)
    alpha_g: float = 2.0
    eta_d: float = 0.05
    dt: float = 0.1
    record_times: tuple = (0.0, 8.0, 16.0, 24.0, 32.0)
    # two sources: a no-growth steady state and a transitioning population
    steady_center: tuple = (3.0084, 0.0997, 0.0)
    steady_count: int = 200
    steady_std: float = 0.05
    transition_center: tuple = (0.5, 0.5, 0.0)
    transition_count: int = 200
    transition_std: float = 0.2
    keep_dims: int = 2

    def validate(self):
        rates = [*self.alpha, self.beta, *self.gamma, *self.delta, *self.eta, self.alpha_g, self.eta_d]
        if any(r < 0 for r in rates):
            raise ValueError("sim-gene rates must be nonnegative")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if list(self.record_times) != sorted(set(self.record_times)) or len(self.record_times) < 2:
            raise ValueError("record_times must be strictly increasing, at least two")
        if not 1 <= self.keep_dims <= 3:
            raise ValueError("keep_dims must be 1, 2 or 3")


def sim_gene_drift(X, p: SimGeneParams):
    x1, x2, x3 = X[:, 0], X[:, 1], X[:, 2]
    a, g, d, b = p.alpha, p.gamma, p.delta, p.beta
    f1 = (a[0] * x1**2 + b) / (1 + a[0] * x1**2 + g[1] * x2**2 + g[2] * x3**2 + b) - d[0] * x1
    f2 = (a[1] * x2**2 + b) / (1 + g[0] * x1**2 + a[1] * x2**2 + g[2] * x3**2 + b) - d[1] * x2
    f3 = a[2] * x3**2 / (1 + a[2] * x3**2) - d[2] * x3
    return np.stack([f1, f2, f3], axis=1)


def sim_gene_growth(x2, alpha_g):
    """Division rate alpha_g * X2^2 / (1 + X2^2), in percent per unit time."""
    x2 = np.asarray(x2, dtype=np.float64)
    return alpha_g * x2**2 / (1 + x2**2)


def gen_sim_gene(params: SimGeneParams | None = None, seed: int = 0) -> TimeSeriesDataset:
    """Simulate the toggle-switch network with stochastic cell division.

    Each Euler-Maruyama step a cell divides with probability
    ``sim_gene_growth(X2) / 100 * dt``; the daughter copies the parent state
    plus ``eta_d * N(0, 1)`` per gene. Concentrations are kept nonnegative.
    """
    p = params or SimGeneParams()
    p.validate()
    rng = np.random.default_rng(seed)
    steady = np.asarray(p.steady_center) + p.steady_std * rng.standard_normal((p.steady_count, 3))
    trans = np.asarray(p.transition_center) + p.transition_std * rng.standard_normal((p.transition_count, 3))
    X = np.maximum(np.vstack([steady, trans]), 0.0)
    eta = np.asarray(p.eta)
    record = list(p.record_times)
    n_steps = int(round((record[-1] - record[0]) / p.dt))
    record_steps = {int(round((r - record[0]) / p.dt)): r for r in record}
    snaps = [Snapshot(record[0], X[:, : p.keep_dims].copy(), np.ones(len(X)))]
    for step in range(1, n_steps + 1):
        X = X + sim_gene_drift(X, p) * p.dt + eta * np.sqrt(p.dt) * rng.standard_normal(X.shape)
        X = np.maximum(X, 0.0)
        prob = sim_gene_growth(X[:, 1], p.alpha_g) / 100.0 * p.dt
        divide = rng.random(len(X)) < prob
        if divide.any():
            kids = X[divide] + p.eta_d * rng.standard_normal((int(divide.sum()), 3))
            X = np.vstack([X, np.maximum(kids, 0.0)])
        if step in record_steps:
            snaps.append(Snapshot(record_steps[step], X[:, : p.keep_dims].copy(), np.ones(len(X))))
    meta = {"generator": "sim-gene", "seed": seed, "params": _jsonable(asdict(p))}
    return TimeSeriesDataset(snaps, meta)


def gen_gaussian_mixture(seed: int = 0, dim: int = 10, spread: float = 0.25) -> TimeSeriesDataset:
    """Two-time mixture: a stationary growing cluster and a bifurcating one.

    t=0: 100 upper + 400 lower points. t=1: 1000 upper (same centre) and
    200 + 200 lower points split into left/right centres.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    rng = np.random.default_rng(seed)
    upper = np.zeros(dim)
    upper[1] = 2.0
    lower = np.zeros(dim)
    lower[1] = -2.0
    left, right = lower.copy(), lower.copy()
    left[0], right[0] = -2.0, 2.0

    def draw(center, n):
        return center + spread * rng.standard_normal((n, dim))

    x0 = np.vstack([draw(upper, 100), draw(lower, 400)])
    x1 = np.vstack([draw(upper, 1000), draw(left, 200), draw(right, 200)])
    meta = {"generator": "gaussian", "seed": seed, "dim": dim, "spread": spread}
    return TimeSeriesDataset(
        [Snapshot(0.0, x0, np.ones(len(x0))), Snapshot(1.0, x1, np.ones(len(x1)))], meta
    )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj
