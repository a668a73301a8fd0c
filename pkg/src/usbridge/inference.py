"""Forward simulation of a learned model.

Any object with ``drift(x, t)``, ``growth(x, t)``, ``score(x, t)`` and a
``nu`` attribute can be simulated. Both modes use the same Euler-Maruyama
step ``x += (v + nu^2/2 s) dt + nu sqrt(dt) xi``; the growth rate is then
read at the moved point and the step's start time.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class PopulationLimitError(RuntimeError):
    """Raised when branching exceeds ``max_population``; carries partial results."""

    def __init__(self, message, cloud=None, tree=None):
        super().__init__(message)
        self.cloud = cloud
        self.tree = tree


@dataclass
class WeightedCloud:
    points: np.ndarray
    log_weights: np.ndarray
    time: float
    n_excluded: int = 0

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def mass(self) -> float:
        return float(np.sum(self.weights))


@dataclass
class LineageNode:
    id: int
    parent_id: int | None
    birth_time: float
    death_time: float | None = None
    terminal_event: str = "survived"
    path: list = field(default_factory=list)
    children: list = field(default_factory=list)


@dataclass
class LineageTree:
    """Event-sourced record of a branching run.

    ``death_time`` is set when a node stops existing, by death or by
    division; ``terminal_event`` tells which.
    """

    nodes: dict = field(default_factory=dict)
    roots: list = field(default_factory=list)
    times: np.ndarray = None
    clipped_steps: int = 0

    def add(self, parent_id, birth_time, x) -> LineageNode:
        node = LineageNode(len(self.nodes), parent_id, birth_time, path=[np.array(x, dtype=np.float64)])
        self.nodes[node.id] = node
        if parent_id is None:
            self.roots.append(node.id)
        else:
            self.nodes[parent_id].children.append(node.id)
        return node

    def alive(self):
        return [n for n in self.nodes.values() if n.terminal_event == "survived"]

    def check(self) -> None:
        """Assert the structural invariants; raises AssertionError on violation."""
        for n in self.nodes.values():
            if n.parent_id is not None:
                assert self.nodes[n.parent_id].birth_time < n.birth_time, f"node {n.id} born before parent"
            if n.terminal_event == "division":
                assert len(n.children) == 2, f"node {n.id} divided into {len(n.children)}"
            elif n.terminal_event == "death":
                assert not n.children and n.death_time is not None, f"dead node {n.id} malformed"
            else:
                assert n.terminal_event == "survived" and not n.children and n.death_time is None

    def events(self):
        """Chronological birth / division / death events."""
        out = []
        for n in self.nodes.values():
            out.append({"id": n.id, "parent": n.parent_id, "kind": "birth", "t": n.birth_time,
                        "x": n.path[0].tolist()})
            if n.terminal_event in ("division", "death"):
                out.append({"id": n.id, "parent": n.parent_id, "kind": n.terminal_event,
                            "t": n.death_time, "x": n.path[-1].tolist()})
        order = {"birth": 1, "division": 0, "death": 0}
        out.sort(key=lambda e: (e["t"], order[e["kind"]], e["id"]))
        return out


def _step_drift(model, x, t):
    v = model.drift(x, t)
    s = model.score(x, t)
    return v + 0.5 * model.nu**2 * s


def _grid(t_span, dt):
    t0, t1 = map(float, t_span)
    if not dt > 0:
        raise ValueError("dt must be positive")
    if t1 <= t0:
        raise ValueError("t_span must be increasing")
    n = max(1, int(math.ceil((t1 - t0) / dt - 1e-9)))
    return np.linspace(t0, t1, n + 1)


def continuous_trajectory(model, start_points, t_span, dt, rng, record_times=None,
                          start_weights=None):
    """Weighted-mass SDE simulation; returns one WeightedCloud per record time.

    Every particle starts with weight 1 (or ``start_weights``) and
    accumulates ``log w += g dt``.
    Particles whose state turns non-finite are dropped and counted in
    ``n_excluded``.
    """
    x = np.atleast_2d(np.asarray(start_points, dtype=np.float64)).copy()
    if x.shape[1] != model.dim:
        raise ValueError(f"start cloud has dimension {x.shape[1]}, model expects {model.dim}")
    grid = _grid(t_span, dt)
    record_times = [grid[-1]] if record_times is None else sorted(float(r) for r in record_times)
    rec_idx = {int(np.argmin(np.abs(grid - r))): r for r in record_times}
    if start_weights is None:
        logw = np.zeros(x.shape[0])
    else:
        sw = np.asarray(start_weights, dtype=np.float64).reshape(-1)
        if sw.shape[0] != x.shape[0] or np.any(sw <= 0):
            raise ValueError("start_weights must be positive, one per point")
        logw = np.log(sw)
    keep = np.ones(x.shape[0], dtype=bool)
    out = []
    nu = model.nu
    if 0 in rec_idx:
        out.append(WeightedCloud(x.copy(), logw.copy(), rec_idx[0]))
    for k in range(1, grid.size):
        t, h = grid[k - 1], grid[k] - grid[k - 1]
        xi = rng.standard_normal(x.shape)
        x = x + _step_drift(model, x, t) * h + nu * math.sqrt(h) * xi
        logw = logw + model.growth(x, t) * h
        bad = ~(np.all(np.isfinite(x), axis=1) & np.isfinite(logw))
        if bad.any():
            keep &= ~bad
            x[bad] = 0.0
            logw[bad] = 0.0
        if k in rec_idx:
            n_bad = int((~keep).sum())
            if n_bad:
                log.warning("%d particles excluded for non-finite state", n_bad)
            out.append(WeightedCloud(x[keep].copy(), logw[keep].copy(), rec_idx[k], n_bad))
    return out


def continuous_inference(model, start_points, t_span, dt, rng, start_weights=None) -> WeightedCloud:
    return continuous_trajectory(model, start_points, t_span, dt, rng, start_weights=start_weights)[-1]


def branching_trajectory(model, start_points, t_span, dt, rng, max_population=1_000_000,
                         record_times=None, record_paths=True):
    """Discrete birth-death simulation with lineage recording.

    Breadth-first by time step: all living cells move, then each draws
    ``alpha ~ U(0, 1)``; when ``alpha <= p = min(|g| dt, 1)`` it divides into
    two identical copies (``g >= 0``) or dies (``g < 0``). Daughters start
    moving at the next step. Steps where ``|g| dt > 1`` are counted in
    ``tree.clipped_steps``.

    Returns
    -------
    clouds : list of WeightedCloud (unit weights) at ``record_times``
    tree : LineageTree
    """
    x = np.atleast_2d(np.asarray(start_points, dtype=np.float64)).copy()
    if x.shape[1] != model.dim:
        raise ValueError(f"start cloud has dimension {x.shape[1]}, model expects {model.dim}")
    grid = _grid(t_span, dt)
    record_times = [grid[-1]] if record_times is None else sorted(float(r) for r in record_times)
    rec_idx = {int(np.argmin(np.abs(grid - r))): r for r in record_times}
    tree = LineageTree(times=grid)
    ids = np.array([tree.add(None, grid[0], p).id for p in x], dtype=np.int64)
    nu = model.nu
    clouds = []

    def snap(when):
        return WeightedCloud(x.copy(), np.zeros(len(x)), when)

    if 0 in rec_idx:
        clouds.append(snap(rec_idx[0]))
    for k in range(1, grid.size):
        if len(x) == 0:
            for kk in range(k, grid.size):
                if kk in rec_idx:
                    clouds.append(snap(rec_idx[kk]))
            break
        t, h = grid[k - 1], grid[k] - grid[k - 1]
        t_next = grid[k]
        xi = rng.standard_normal(x.shape)
        x = x + _step_drift(model, x, t) * h + nu * math.sqrt(h) * xi
        g = model.growth(x, t)
        raw_p = np.abs(g) * h
        tree.clipped_steps += int(np.sum(raw_p > 1))
        p = np.minimum(raw_p, 1.0)
        alpha = rng.random(len(x))
        event = alpha <= p
        divide = event & (g >= 0)
        die = event & (g < 0)
        if record_paths:
            for cid, pos in zip(ids, x):
                tree.nodes[int(cid)].path.append(pos.copy())
        new_x, new_ids = [x[~event]], [ids[~event]]
        for cid in ids[die]:
            node = tree.nodes[int(cid)]
            node.terminal_event, node.death_time = "death", t_next
        for cid, pos in zip(ids[divide], x[divide]):
            node = tree.nodes[int(cid)]
            node.terminal_event, node.death_time = "division", t_next
            a = tree.add(node.id, t_next, pos)
            b = tree.add(node.id, t_next, pos)
            new_x.append(np.stack([pos, pos]))
            new_ids.append(np.array([a.id, b.id]))
        x = np.concatenate(new_x) if new_x else np.empty((0, model.dim))
        ids = np.concatenate(new_ids).astype(np.int64)
        if k in rec_idx:
            clouds.append(snap(rec_idx[k]))
        if len(x) > max_population:
            raise PopulationLimitError(
                f"population {len(x)} exceeded max_population={max_population} at t={t_next:.4g}",
                cloud=snap(t_next), tree=tree)
    if tree.clipped_steps:
        log.warning("branching probability clipped to 1 in %d cell-steps", tree.clipped_steps)
    return clouds, tree


def branching_inference(model, start_points, t_span, dt, rng, max_population=1_000_000,
                        record_paths=True):
    clouds, tree = branching_trajectory(model, start_points, t_span, dt, rng, max_population,
                                        record_paths=record_paths)
    return clouds[-1], tree


def lineage_stats(tree: LineageTree) -> dict:
    divisions = sum(n.terminal_event == "division" for n in tree.nodes.values())
    deaths = sum(n.terminal_event == "death" for n in tree.nodes.values())
    survivors = sum(n.terminal_event == "survived" for n in tree.nodes.values())

    def depth(nid):
        d = 0
        while tree.nodes[nid].parent_id is not None:
            nid = tree.nodes[nid].parent_id
            d += 1
        return d

    per_root = {}
    for n in tree.nodes.values():
        root = n.id
        while tree.nodes[root].parent_id is not None:
            root = tree.nodes[root].parent_id
        if n.terminal_event == "survived":
            per_root[root] = per_root.get(root, 0) + 1
    return {
        "roots": len(tree.roots),
        "divisions": divisions,
        "deaths": deaths,
        "survivors": survivors,
        "max_depth": max((depth(i) for i in tree.nodes), default=0),
        "per_root_survivors": {int(r): per_root.get(r, 0) for r in tree.roots},
        "clipped_steps": tree.clipped_steps,
    }


def write_trajectory_csv(tree: LineageTree, path, time_map=None) -> None:
    """Rows ``traj_id,parent_id,t,x0..x{d-1}``; one row per recorded position."""
    time_map = time_map or (lambda s: s)
    grid = tree.times
    lines = []
    d = None
    for n in tree.nodes.values():
        start = int(np.argmin(np.abs(grid - n.birth_time)))
        for k, pos in enumerate(n.path):
            d = len(pos)
            parent = "" if n.parent_id is None else str(n.parent_id)
            coords = ",".join(repr(float(c)) for c in pos)
            lines.append(f"{n.id},{parent},{float(time_map(float(grid[start + k])))!r},{coords}")
    header = "traj_id,parent_id,t," + ",".join(f"x{i}" for i in range(d or 0))
    Path(path).write_text(header + "\n" + "\n".join(lines) + "\n", encoding="utf-8")


def write_events_jsonl(tree: LineageTree, path, time_map=None) -> None:
    time_map = time_map or (lambda s: s)
    with open(path, "w", encoding="utf-8") as fh:
        for ev in tree.events():
            ev = dict(ev, t=float(time_map(float(ev["t"]))))
            fh.write(json.dumps(ev) + "\n")
