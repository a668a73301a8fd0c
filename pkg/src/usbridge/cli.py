"""Command-line pipeline: ``usbridge {gen-data,coupling,train,simulate,evaluate}``.

Settings come from built-in defaults, then an optional JSON config file
with one object per section, then command-line flags; later sources win.
Every command writes ``run.json`` into its output directory.
"""

from __future__ import annotations

import argparse
import contextlib
import copy
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .coupling import CouplingError, ParameterError, minibatch_semi_coupling
from .data import (DataFormatError, SimGeneParams, gen_gaussian_mixture, gen_sim_gene, load_snapshots,
                   save_snapshots, save_weighted_cloud, sim_gene_growth)
from .evaluation import ProtocolError, evaluate_model, growth_correlation, hold_one_out_all
from .inference import (PopulationLimitError, branching_trajectory, continuous_trajectory, lineage_stats,
                        write_events_jsonl, write_trajectory_csv)
from .ndnum import NumericError
from .training import ModelFormatError, TrainConfig, load_model, save_model, train, write_loss_log

log = logging.getLogger("usbridge")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"delta", "coupling", "minibatch_ot_size",
                                                      "eps_entropic", "ot_tol", "ot_max_iter"}

DEFAULTS = {
    "seed": None,
    "data": {"path": None, "generator": None, "seed": None, "dim": 10, "spread": 0.25},
    "coupling": {"delta": 1.3, "method": "oet", "eps_entropic": None, "minibatch_ot_size": 0,
                 "tol": 1e-9, "max_iter": 100_000},
    "train": {k: v for k, v in asdict(TrainConfig()).items() if k in _TRAIN_KEYS} | {"seed": None},
    "inference": {"model": None, "mode": "continuous", "dt": 0.01, "n_roots": None, "repeats": 1,
                  "max_population": 1_000_000, "seed": None, "times": None},
    "eval": {"model": None, "holdout": False, "dt": 0.01, "standardize": True, "seed": None,
             "probe_time": None},
    "output": {"dir": ".", "plot": False},
}


def _merge(base, override, where="config"):
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown key {where}.{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.{key} must be an object")
            out[key] = _merge(base[key], value, f"{where}.{key}")
        else:
            out[key] = value
    return out


def load_config(path):
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return cfg


def resolve(args, flag_map):
    """Defaults, then the config file, then the flags listed in ``flag_map``."""
    cfg = _merge(copy.deepcopy(DEFAULTS), load_config(args.config))
    flags = {}
    for attr, (section, key) in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            flags.setdefault(section, {})[key] = value
    if args.seed is not None:
        flags["seed"] = args.seed
    if args.out is not None:
        flags.setdefault("output", {})["dir"] = args.out
    cfg = copy.deepcopy(_merge(cfg, flags))
    if cfg["seed"] is None:
        env = os.environ.get("USB_SEED")
        try:
            cfg["seed"] = int(env) if env is not None else 0
        except ValueError:
            raise ConfigError(f"USB_SEED must be an integer, got {env!r}") from None
    for section in ("data", "train", "inference", "eval"):
        if cfg[section]["seed"] is None:
            cfg[section]["seed"] = cfg["seed"]
    _validate(cfg)
    return cfg


def _validate(cfg):
    c = cfg["coupling"]
    if not _num(c["delta"]) or c["delta"] <= 0:
        raise ConfigError("coupling.delta must be positive")
    if c["method"] not in ("oet", "product"):
        raise ConfigError("coupling.method must be 'oet' or 'product'")
    if c["eps_entropic"] is not None and (not _num(c["eps_entropic"]) or c["eps_entropic"] <= 0):
        raise ConfigError("coupling.eps_entropic must be positive")
    try:
        train_config(cfg).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from None
    inf = cfg["inference"]
    if inf["mode"] not in ("continuous", "branching"):
        raise ConfigError("inference.mode must be 'continuous' or 'branching'")
    if not _num(inf["dt"]) or inf["dt"] <= 0:
        raise ConfigError("inference.dt must be positive")
    if int(inf["repeats"]) < 1 or int(inf["max_population"]) < 1:
        raise ConfigError("inference.repeats and inference.max_population must be >= 1")
    if not _num(cfg["eval"]["dt"]) or cfg["eval"]["dt"] <= 0:
        raise ConfigError("eval.dt must be positive")
    if cfg["data"]["generator"] not in (None, "sim-gene", "gaussian"):
        raise ConfigError(f"unknown generator {cfg['data']['generator']!r}")


def _num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def train_config(cfg) -> TrainConfig:
    c, t = cfg["coupling"], cfg["train"]
    return TrainConfig(delta=c["delta"], coupling=c["method"], minibatch_ot_size=int(c["minibatch_ot_size"]),
                       eps_entropic=c["eps_entropic"], ot_tol=c["tol"], ot_max_iter=int(c["max_iter"]),
                       **{k: t[k] for k in _TRAIN_KEYS if k != "seed"}, seed=int(t["seed"]))


def _outdir(cfg) -> Path:
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run(out: Path, command: str, cfg, extra=None):
    record = {"command": command, "library_version": __version__, "config": cfg}
    if extra:
        record.update(extra)
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n",
                                  encoding="utf-8")


def _dataset(cfg):
    path = cfg["data"]["path"]
    if path is None:
        raise ConfigError("no dataset given (--data or data.path)")
    return load_snapshots(path)


# ------------------------------------------------------------------ commands


def cmd_gen_data(cfg):
    d = cfg["data"]
    if d["generator"] is None:
        raise ConfigError("gen-data needs --generator")
    if d["generator"] == "sim-gene":
        ds = gen_sim_gene(SimGeneParams(), seed=int(d["seed"]))
    else:
        ds = gen_gaussian_mixture(seed=int(d["seed"]), dim=int(d["dim"]), spread=float(d["spread"]))
    out = _outdir(cfg)
    path = Path(d["path"]) if d["path"] else out / f"{d['generator']}.csv"
    save_snapshots(ds, path)
    _write_run(out, "gen-data", cfg, {"outputs": [str(path)]})
    print(f"wrote {path} ({sum(len(s) for s in ds.snapshots)} rows, {len(ds.snapshots)} snapshots)")


def write_coupling_csv(sc, path, floor=1e-12) -> None:
    """Sparse ``i,j,gamma0,gamma1`` dump; pairs where both entries are below ``floor`` are omitted."""
    r, c = np.nonzero((sc.gamma0 >= floor) | (sc.gamma1 >= floor))
    lines = ["i,j,gamma0,gamma1"] + [
        f"{sc.rows[i]},{sc.cols[j]},{float(sc.gamma0[i, j])!r},{float(sc.gamma1[i, j])!r}" for i, j in zip(r, c)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_coupling(cfg):
    ds = _dataset(cfg)
    tc = train_config(cfg)
    masses = [s.weights / ds.snapshots[0].mass for s in ds.snapshots]
    rng = np.random.default_rng(np.random.SeedSequence(tc.seed).spawn(3)[1])
    out = _outdir(cfg)
    summary, outputs = [], []
    for k in range(ds.n_intervals):
        a, b = ds.snapshots[k], ds.snapshots[k + 1]
        for bi, sc in enumerate(minibatch_semi_coupling(
                a.points, masses[k], b.points, masses[k + 1], tc.minibatch_ot_size, tc.delta, rng,
                eps=tc.eps_entropic, max_iter=tc.ot_max_iter, tol=tc.ot_tol, method=tc.coupling)):
            path = out / f"coupling_{k}_{bi}.csv"
            write_coupling_csv(sc, path)
            outputs.append(str(path))
            summary.append({"pair": k, "batch": bi, "eps": sc.eps,
                            "mass0": float(sc.gamma0.sum()), "mass1": float(sc.gamma1.sum()),
                            **{key: v for key, v in sc.info.items() if key != "method"}})
    _write_run(out, "coupling", cfg, {"outputs": outputs, "summary": summary})
    print(json.dumps(summary, indent=1, default=str))


def cmd_train(cfg, dump_coupling=False):
    ds = _dataset(cfg)
    tc = train_config(cfg)
    out = _outdir(cfg)
    result = train(ds, tc)
    save_model(result.model, out / "model.npz")
    write_loss_log(result.loss_log, out / "loss.csv")
    outputs = [str(out / "model.npz"), str(out / "loss.csv")]
    if dump_coupling:
        for k, batches in enumerate(result.couplings):
            for bi, sc in enumerate(batches):
                p = out / f"coupling_{k}_{bi}.csv"
                write_coupling_csv(sc, p)
                outputs.append(str(p))
    _write_run(out, "train", cfg, {"outputs": outputs, "data_hash": ds.content_hash(),
                                   "final_loss": result.loss_log[-1][1]})
    print(f"trained {tc.epochs} steps, final loss {result.loss_log[-1][1]:.6g}; model in {out / 'model.npz'}")


def _model(path):
    if path is None:
        raise ConfigError("no model given (--model)")
    return load_model(path)


def _time_maps(model, ds):
    times = model.provenance.get("original_times") or (ds.original_times if ds else None)
    if not times:
        return (lambda s: s), (lambda t: t)
    internal = list(range(len(times)))
    return (lambda s: float(np.interp(s, internal, times))), (lambda t: float(np.interp(t, times, internal)))


def cmd_simulate(cfg):
    inf = cfg["inference"]
    model = _model(inf["model"])
    ds = _dataset(cfg)
    if ds.dim != model.dim:
        raise ConfigError(f"model dimension {model.dim} does not match data dimension {ds.dim}")
    to_orig, to_int = _time_maps(model, ds)
    n_int = len(model.provenance.get("original_times") or ds.original_times) - 1
    rec = [to_int(t) for t in inf["times"]] if inf["times"] else [float(k) for k in range(1, n_int + 1)]
    span = (0.0, max(rec))
    out = _outdir(cfg)
    s0 = ds.snapshots[0]
    root_ss = np.random.SeedSequence(int(inf["seed"]))
    outputs, summaries = [], []
    plot = cfg["output"]["plot"] and ds.dim >= 2
    if inf["mode"] == "continuous":
        rng = np.random.default_rng(root_ss)
        clouds = continuous_trajectory(model, s0.points, span, inf["dt"], rng, rec, s0.weights)
        for k, c in enumerate(clouds):
            c.time = to_orig(c.time)
            p = out / f"cloud_{k}.csv"
            save_weighted_cloud(c, p, {"time": c.time, "excluded": c.n_excluded})
            outputs.append(str(p))
            summaries.append({"time": c.time, "mass": c.mass, "n": len(c.points), "excluded": c.n_excluded})
        if plot:
            p = out / "clouds.svg"
            write_svg(p, [(c.points, c.weights) for c in clouds], [], [s.points for s in ds.snapshots])
            outputs.append(str(p))
    else:
        for r, ss in enumerate(root_ss.spawn(int(inf["repeats"]))):
            rng = np.random.default_rng(ss)
            n_roots = inf["n_roots"] or len(s0)
            pick = rng.choice(len(s0), n_roots, replace=n_roots > len(s0), p=s0.weights / s0.mass)
            try:
                clouds, tree = branching_trajectory(model, s0.points[pick], span, inf["dt"], rng,
                                                    int(inf["max_population"]), record_times=rec)
            except PopulationLimitError as exc:
                log.error("%s", exc)
                if exc.tree is not None:
                    write_trajectory_csv(exc.tree, out / f"trajectories_{r}.csv", to_orig)
                raise
            tp, ep = out / f"trajectories_{r}.csv", out / f"events_{r}.jsonl"
            write_trajectory_csv(tree, tp, to_orig)
            write_events_jsonl(tree, ep, to_orig)
            outputs += [str(tp), str(ep)]
            stats = lineage_stats(tree)
            stats["counts"] = {repr(to_orig(c.time)): len(c.points) for c in clouds}
            summaries.append(stats)
            if plot:
                p = out / f"trajectories_{r}.svg"
                paths = [np.asarray(n.path) for n in tree.nodes.values()]
                write_svg(p, [], paths, [s.points for s in ds.snapshots])
                outputs.append(str(p))
        (out / "lineage.json").write_text(json.dumps(summaries, indent=2) + "\n", encoding="utf-8")
        outputs.append(str(out / "lineage.json"))
    _write_run(out, "simulate", cfg, {"outputs": outputs})
    print(json.dumps(summaries, indent=1, default=str))


def cmd_evaluate(cfg):
    ev = cfg["eval"]
    ds = _dataset(cfg)
    out = _outdir(cfg)
    outputs = []
    if ev["holdout"]:
        if len(ds.snapshots) < 3:
            raise ProtocolError("hold-one-out needs at least one interior snapshot")
        tc = train_config(cfg)
        reports, mean = hold_one_out_all(ds, tc, ev["dt"], int(ev["seed"]), bool(ev["standardize"]))
        rows = ["held_index,time,w1"] + [f"{i + 1},{float(r.times[0])!r},{float(r.mean_w1)!r}" for i, r in enumerate(reports)]
        rows.append(f"mean,,{float(mean)!r}")
        (out / "holdout.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
        (out / "holdout.json").write_text(json.dumps({"mean_w1": mean, "reports": [asdict(r) for r in reports]},
                                                     indent=2, default=str) + "\n", encoding="utf-8")
        outputs += [str(out / "holdout.csv"), str(out / "holdout.json")]
        print(f"hold-one-out mean W1 {mean:.6g}")
    else:
        model = _model(ev["model"])
        if ds.dim != model.dim:
            raise ConfigError(f"model dimension {model.dim} does not match data dimension {ds.dim}")
        report = evaluate_model(model, ds, ev["dt"], int(ev["seed"]), bool(ev["standardize"]))
        gen = ds.metadata.get("generator")
        if gen == "sim-gene" and ds.dim >= 2:
            params = ds.metadata.get("params", {})
            alpha_g = params.get("alpha_g", SimGeneParams.alpha_g)
            probe = ds.snapshots[-1]
            t = ds.to_internal(ev["probe_time"]) if ev["probe_time"] is not None else float(ds.n_intervals)
            report.growth_pearson = growth_correlation(model, probe.points,
                                                       sim_gene_growth(probe.points[:, 1], alpha_g), t)
        report.to_json(out / "report.json")
        report.to_csv(out / "report.csv")
        outputs += [str(out / "report.json"), str(out / "report.csv")]
        print(f"mean W1 {report.mean_w1:.6g}  mean RME {report.mean_rme:.6g}")
    _write_run(out, "evaluate", cfg, {"outputs": outputs})


# ---------------------------------------------------------------------- SVG


def write_svg(path, clouds, paths, references, size=480):
    """Scatter of the first two coordinates; references grey, clouds coloured, paths as polylines."""
    allpts = [p for p, _ in clouds] + list(paths) + list(references)
    allpts = np.vstack([np.atleast_2d(p)[:, :2] for p in allpts if len(p)])
    lo, hi = allpts.min(axis=0), allpts.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    pad = 20

    def xy(p):
        q = (np.atleast_2d(p)[:, :2] - lo) / span * (size - 2 * pad) + pad
        q[:, 1] = size - q[:, 1]
        return q

    colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    for ref in references:
        parts += [f'<circle cx="{a:.2f}" cy="{b:.2f}" r="1.5" fill="#bbbbbb"/>' for a, b in xy(ref)]
    for k, path in enumerate(paths):
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in xy(path))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{colours[k % 6]}" stroke-width="0.8"/>')
    for k, (pts, w) in enumerate(clouds):
        r = 1.0 + 2.0 * np.sqrt(w / w.max()) if len(w) else []
        parts += [f'<circle cx="{a:.2f}" cy="{b:.2f}" r="{ri:.2f}" fill="{colours[k % 6]}" fill-opacity="0.6"/>'
                  for (a, b), ri in zip(xy(pts), r)]
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


# ------------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="usbridge", description="Unbalanced Schrodinger bridge pipeline")
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file with per-section objects")
    common.add_argument("--seed", type=int, help="global seed (falls back to USB_SEED, then 0)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    g.add_argument("--generator", choices=["sim-gene", "gaussian"])
    g.add_argument("--dim", type=int)
    g.add_argument("--spread", type=float)
    g.add_argument("--path", dest="data_path", help="output CSV (default <out>/<generator>.csv)")

    def coupling_flags(q):
        q.add_argument("--data", help="snapshot CSV")
        q.add_argument("--delta", type=float)
        q.add_argument("--eps", type=float, dest="eps_entropic")
        q.add_argument("--minibatch", type=int, dest="minibatch_ot_size")
        q.add_argument("--coupling", choices=["oet", "product"], dest="method")

    c = sub.add_parser("coupling", parents=[common], help="compute semi-couplings between snapshots")
    coupling_flags(c)

    t = sub.add_parser("train", parents=[common], help="fit drift, growth and score networks")
    coupling_flags(t)
    t.add_argument("--nu", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int, dest="batch_per_pair")
    t.add_argument("--lr", type=float, dest="learning_rate")
    t.add_argument("--width", type=int, dest="hidden_width")
    t.add_argument("--depth", type=int)
    t.add_argument("--cosine", action="store_const", const=True)
    t.add_argument("--dump-coupling", action="store_true")

    s = sub.add_parser("simulate", parents=[common], help="run continuous or branching inference")
    s.add_argument("--model")
    s.add_argument("--data", help="snapshot CSV providing the start cloud")
    s.add_argument("--mode", choices=["continuous", "branching"])
    s.add_argument("--dt", type=float)
    s.add_argument("--n-roots", type=int, dest="n_roots")
    s.add_argument("--repeats", type=int)
    s.add_argument("--max-population", type=int, dest="max_population")
    s.add_argument("--times", type=float, nargs="+", help="record times in original units")
    s.add_argument("--plot", action="store_const", const=True)

    e = sub.add_parser("evaluate", parents=[common], help="score a model or run hold-one-out")
    coupling_flags(e)
    e.add_argument("--model")
    e.add_argument("--holdout", action="store_const", const=True)
    e.add_argument("--dt", type=float)
    e.add_argument("--epochs", type=int)
    e.add_argument("--width", type=int, dest="hidden_width")
    e.add_argument("--depth", type=int)
    return p


_FLAGS = {
    "gen-data": {"generator": ("data", "generator"), "dim": ("data", "dim"), "spread": ("data", "spread"),
                 "data_path": ("data", "path")},
    "coupling": {},
    "train": {"nu": ("train", "nu"), "epochs": ("train", "epochs"), "batch_per_pair": ("train", "batch_per_pair"),
              "learning_rate": ("train", "learning_rate"), "hidden_width": ("train", "hidden_width"),
              "depth": ("train", "depth"), "cosine": ("train", "cosine")},
    "simulate": {"model": ("inference", "model"), "data": ("data", "path"), "mode": ("inference", "mode"),
                 "dt": ("inference", "dt"), "n_roots": ("inference", "n_roots"),
                 "repeats": ("inference", "repeats"), "max_population": ("inference", "max_population"),
                 "times": ("inference", "times"), "plot": ("output", "plot")},
    "evaluate": {"model": ("eval", "model"), "holdout": ("eval", "holdout"), "dt": ("eval", "dt"),
                 "epochs": ("train", "epochs"), "hidden_width": ("train", "hidden_width"),
                 "depth": ("train", "depth")},
}
_COUPLING_FLAGS = {"data": ("data", "path"), "delta": ("coupling", "delta"),
                   "eps_entropic": ("coupling", "eps_entropic"),
                   "minibatch_ot_size": ("coupling", "minibatch_ot_size"), "method": ("coupling", "method")}
for _cmd in ("coupling", "train", "evaluate"):
    _FLAGS[_cmd] = {**_COUPLING_FLAGS, **_FLAGS[_cmd]}


def _threads(n):
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args, _FLAGS[args.command])
        with _threads(args.threads):
            if args.command == "gen-data":
                cmd_gen_data(cfg)
            elif args.command == "coupling":
                cmd_coupling(cfg)
            elif args.command == "train":
                cmd_train(cfg, args.dump_coupling)
            elif args.command == "simulate":
                cmd_simulate(cfg)
            else:
                cmd_evaluate(cfg)
    except (ConfigError, ProtocolError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, CouplingError, PopulationLimitError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DataFormatError, ModelFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
