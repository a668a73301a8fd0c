"""Conditional unbalanced score matching over all consecutive snapshot pairs."""

from __future__ import annotations

import json
import logging
import math
import time
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bridge import BridgeBatch, sample_pb_bridge, score_weight
from .coupling import minibatch_semi_coupling, pair_sampler
from .ndnum import AdamState, MlpSpec, NumericError, adam_step, init_params, mlp_backward, mlp_forward

log = logging.getLogger(__name__)

MODEL_FORMAT = "usbridge-model"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    pass


@dataclass
class ModelTriple:
    """Drift, growth and score networks sharing one architecture.

    Inputs are shifted by ``x_mean`` and divided by ``x_scale`` before the
    networks see them; time is the internal clock (interval k spans [k, k+1]).
    """

    v_spec: MlpSpec
    g_spec: MlpSpec
    s_spec: MlpSpec
    v_params: list
    g_params: list
    s_params: list
    nu: float
    x_mean: np.ndarray = None
    x_scale: np.ndarray = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        d = self.v_spec.input_dim
        if self.x_mean is None:
            self.x_mean = np.zeros(d)
        if self.x_scale is None:
            self.x_scale = np.ones(d)
        self.x_mean = np.asarray(self.x_mean, dtype=np.float64)
        self.x_scale = np.asarray(self.x_scale, dtype=np.float64)
        if not self.nu > 0:
            raise ValueError("nu must be positive")

    @classmethod
    def create(cls, dim, nu, rng, hidden_width=256, depth=5, x_mean=None, x_scale=None):
        v_spec = MlpSpec(dim, dim, hidden_width, depth)
        g_spec = MlpSpec(dim, 1, hidden_width, depth)
        s_spec = MlpSpec(dim, dim, hidden_width, depth)
        return cls(v_spec, g_spec, s_spec,
                   init_params(v_spec, rng),
                   init_params(g_spec, rng, zero_last=True),
                   init_params(s_spec, rng, zero_last=True),
                   nu, x_mean, x_scale)

    @property
    def dim(self) -> int:
        return self.v_spec.input_dim

    def _in(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise ValueError(f"model expects dimension {self.dim}, got {x.shape[1]}")
        return (x - self.x_mean) / self.x_scale

    def drift(self, x, t):
        return mlp_forward(self.v_spec, self.v_params, self._in(x), t)

    def growth(self, x, t):
        return mlp_forward(self.g_spec, self.g_params, self._in(x), t)[:, 0]

    def score(self, x, t):
        return mlp_forward(self.s_spec, self.s_params, self._in(x), t)

    @property
    def params(self):
        return [self.v_params, self.g_params, self.s_params]

    @params.setter
    def params(self, triple):
        self.v_params, self.g_params, self.s_params = triple


@dataclass
class TrainConfig:
    delta: float = 1.3
    nu: float = 0.001
    epochs: int = 1000
    batch_per_pair: int = 256
    learning_rate: float = 1e-3
    seed: int = 0
    minibatch_ot_size: int = 0
    t_floor: float = 1e-3
    hidden_width: int = 256
    depth: int = 5
    coupling: str = "oet"
    eps_entropic: float | None = None
    cosine: bool = False
    ot_tol: float = 1e-9
    ot_max_iter: int = 100_000

    def validate(self):
        for name in ("delta", "nu", "learning_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("epochs", "batch_per_pair", "hidden_width", "depth"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.minibatch_ot_size < 0:
            raise ValueError("minibatch_ot_size must be >= 0")
        if not 0 < self.t_floor < 0.5:
            raise ValueError("t_floor must lie in (0, 0.5)")
        if self.coupling not in ("oet", "product"):
            raise ValueError("coupling must be 'oet' or 'product'")
        if self.eps_entropic is not None and not self.eps_entropic > 0:
            raise ValueError("eps_entropic must be positive")


@dataclass
class TrainResult:
    model: ModelTriple
    loss_log: list
    couplings: list
    runtime: float


def cusm_loss(model: ModelTriple, batch: BridgeBatch, global_t, with_grad=True):
    """Mass-weighted CUSM loss and its parameter gradients.

    ``mean_i w_i (|v - u|^2 + (g - g*)^2 + |lambda(t) s + eps|^2)`` with the
    networks evaluated at ``(x_i, global_t_i)`` and ``lambda`` taken at the
    in-interval time ``batch.t``.

    Returns
    -------
    loss : float
    parts : dict with ``loss_v``, ``loss_g``, ``loss_s``
    grads : [grads_v, grads_g, grads_s] or None
    """
    n = len(batch)
    xin = model._in(batch.x)
    v, cache_v = mlp_forward(model.v_spec, model.v_params, xin, global_t, return_cache=True)
    g, cache_g = mlp_forward(model.g_spec, model.g_params, xin, global_t, return_cache=True)
    s, cache_s = mlp_forward(model.s_spec, model.s_params, xin, global_t, return_cache=True)
    lam = score_weight(batch.t, model.nu)[:, None]
    w = batch.mass_weight[:, None]
    rv = v - batch.u_target
    rg = g - batch.g_target[:, None]
    rs = lam * s + batch.eps_target
    per_v = np.sum(rv * rv, axis=1)
    per_g = rg[:, 0] ** 2
    per_s = np.sum(rs * rs, axis=1)
    per = batch.mass_weight * (per_v + per_g + per_s)
    if not np.all(np.isfinite(per)):
        bad = int(np.flatnonzero(~np.isfinite(per))[0])
        raise NumericError(f"non-finite CUSM loss at sample {bad} (t={batch.t[bad]:.4g})")
    loss = float(per.mean())
    parts = {
        "loss_v": float(np.mean(batch.mass_weight * per_v)),
        "loss_g": float(np.mean(batch.mass_weight * per_g)),
        "loss_s": float(np.mean(batch.mass_weight * per_s)),
    }
    if not with_grad:
        return loss, parts, None
    grads = [
        mlp_backward(model.v_spec, model.v_params, cache_v, 2.0 * w * rv / n),
        mlp_backward(model.g_spec, model.g_params, cache_g, 2.0 * w * rg / n),
        mlp_backward(model.s_spec, model.s_params, cache_s, 2.0 * w * lam * rs / n),
    ]
    return loss, parts, grads


def normalized_masses(dataset):
    """Snapshot weights divided by the initial total mass."""
    m0 = dataset.snapshots[0].mass
    return [s.weights / m0 for s in dataset.snapshots]


def build_couplings(dataset, config: TrainConfig, rng):
    """Semi-couplings for every consecutive pair (a list of batches per pair)."""
    masses = normalized_masses(dataset)
    out = []
    for k in range(dataset.n_intervals):
        a, b = dataset.snapshots[k], dataset.snapshots[k + 1]
        batches = list(minibatch_semi_coupling(
            a.points, masses[k], b.points, masses[k + 1], config.minibatch_ot_size,
            config.delta, rng, eps=config.eps_entropic, max_iter=config.ot_max_iter,
            tol=config.ot_tol, method=config.coupling))
        out.append(batches)
    return out


def draw_training_batch(dataset, couplings, config: TrainConfig, rng):
    """One sweep: sample bridges for every pair and concatenate."""
    parts, global_t = [], []
    b = config.batch_per_pair
    d = dataset.dim
    for k, batches in enumerate(couplings):
        semi = batches[rng.integers(len(batches))] if len(batches) > 1 else batches[0]
        i, j, m0, m1 = pair_sampler(semi, b, rng)
        t = rng.uniform(config.t_floor, 1.0 - config.t_floor, b)
        eps = rng.standard_normal((b, d))
        x0 = dataset.snapshots[k].points[i]
        x1 = dataset.snapshots[k + 1].points[j]
        parts.append(sample_pb_bridge(x0, x1, m0, m1, config.nu, t, eps=eps))
        global_t.append(k + t)
    return BridgeBatch.concat(parts), np.concatenate(global_t)


def train(dataset, config: TrainConfig | None = None, callback=None) -> TrainResult:
    """Fit drift, growth and score networks to a time-series dataset."""
    config = config or TrainConfig()
    config.validate()
    start = time.perf_counter()
    ss = np.random.SeedSequence(config.seed)
    init_ss, coupling_ss, train_ss = ss.spawn(3)
    couplings = build_couplings(dataset, config, np.random.default_rng(coupling_ss))
    mean, scale = dataset.pooled_stats()
    model = ModelTriple.create(dataset.dim, config.nu, np.random.default_rng(init_ss),
                               config.hidden_width, config.depth, mean, scale)
    rng = np.random.default_rng(train_ss)
    states = [AdamState(lr=config.learning_rate) for _ in range(3)]
    loss_log = []
    for step in range(1, config.epochs + 1):
        if config.cosine:
            lr = 0.5 * config.learning_rate * (1 + math.cos(math.pi * (step - 1) / config.epochs))
            for st in states:
                st.lr = lr
        batch, gt = draw_training_batch(dataset, couplings, config, rng)
        loss, parts, grads = cusm_loss(model, batch, gt)
        new = []
        for params, gr, st in zip(model.params, grads, states):
            p, _ = adam_step(st, params, gr)
            new.append(p)
        model.params = new
        loss_log.append((step, loss, parts["loss_v"], parts["loss_g"], parts["loss_s"]))
        if callback is not None:
            callback(step, loss, parts)
    model.provenance = {
        "library_version": __version__,
        "config": asdict(config),
        "data_hash": dataset.content_hash(),
        "original_times": dataset.original_times,
        "coupling_eps": [[float(sc.eps) for sc in batches] for batches in couplings],
    }
    return TrainResult(model, loss_log, couplings, time.perf_counter() - start)


def write_loss_log(loss_log, path) -> None:
    lines = ["step,loss,loss_v,loss_g,loss_s"]
    lines += [f"{s},{float(l)!r},{float(lv)!r},{float(lg)!r},{float(ls)!r}" for s, l, lv, lg, ls in loss_log]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_model(model: ModelTriple, path) -> None:
    """Write an ``.npz`` container: flat float64 parameter arrays plus JSON metadata."""
    meta = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "nu": model.nu,
        "specs": {"v": model.v_spec.to_dict(), "g": model.g_spec.to_dict(), "s": model.s_spec.to_dict()},
        "provenance": model.provenance,
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
              "x_mean": model.x_mean, "x_scale": model.x_scale}
    for name, params in zip("vgs", model.params):
        for i, p in enumerate(params):
            arrays[f"{name}_{i}"] = p.ravel()
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path) -> ModelTriple:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            if meta.get("format") != MODEL_FORMAT:
                raise ModelFormatError(f"{path}: not a {MODEL_FORMAT} file")
            if meta.get("version") != MODEL_VERSION:
                raise ModelFormatError(f"{path}: unsupported model version {meta.get('version')}")
            specs = {k: MlpSpec(**v) for k, v in meta["specs"].items()}
            params = {}
            for name in "vgs":
                shapes = specs[name].param_shapes()
                params[name] = [np.asarray(z[f"{name}_{i}"], dtype=np.float64).reshape(shape)
                                for i, shape in enumerate(shapes)]
            x_mean, x_scale = z["x_mean"], z["x_scale"]
    except ModelFormatError:
        raise
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: unreadable model file ({exc})") from exc
    return ModelTriple(specs["v"], specs["g"], specs["s"], params["v"], params["g"], params["s"],
                       meta["nu"], x_mean, x_scale, meta.get("provenance", {}))
