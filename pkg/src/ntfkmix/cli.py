"""Command-line interface: simulate, decompose, features, extrapolate, report.

Every command writes into its own output directory and leaves a
``manifest.json`` there. Apart from the manifest (which records wall-clock
time), outputs depend only on the inputs and the master seed.

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .ntf import NtfOptions, load_model, read_metadata, residual_diagnostics, save_model
from .ntfk import EnsembleConfig, select_k, write_reports
from .pipeline import (compression_ratio, feature_decompose, pair_features,
                       predict_product_means, product_features, transient_stats,
                       write_extrapolation, write_feature_stats)
from .rdsim import (ConfigError, SimulationConfig, StepSolverError, recover_species,
                    simulate_invariants)
from .tensor import TensorFormatError, read_tensor, reconstruct, relative_error, write_tensor

log = logging.getLogger("ntfkmix")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3
SWEEP_V0 = (1.0, 1e-1, 1e-2, 1e-3, 1e-4)


class ValidationError(Exception):
    pass


class Manifest:
    """Collects run metadata and writes ``manifest.json`` on exit."""

    def __init__(self, command, out, args, seed=None, config=None):
        self.out = Path(out)
        self.data = {
            "command": command,
            "argv": [str(a) for a in args],
            "config": None if config is None else str(config),
            "inputs": [],
            "outputs": [],
            "seed": seed,
            "version": __version__,
            "status": "running",
        }
        self.start = time.perf_counter()

    def input(self, path):
        self.data["inputs"].append(str(path))

    def output(self, path):
        self.data["outputs"].append(str(Path(path).relative_to(self.out)))
        return path

    def finish(self, status, message=None):
        self.data["status"] = status
        if message:
            self.data["message"] = message
        self.data["wall_clock_seconds"] = round(time.perf_counter() - self.start, 3)
        self.data["outputs"].sort()
        self.out.mkdir(parents=True, exist_ok=True)
        with open(self.out / "manifest.json", "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _fmt(x):
    return repr(float(x))


def _write_times(path, times):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "time"])
        for i, t in enumerate(times):
            w.writerow([i + 1, _fmt(t)])


def _read_times(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r["time"]) for r in rows])


def _load_tensor(path):
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"{path}: no such tensor file")
    try:
        return read_tensor(path)
    except TensorFormatError as exc:
        raise ValidationError(str(exc)) from None


def _load_model(path):
    path = Path(path)
    if not (path / "core.ntk").is_file():
        raise ValidationError(f"{path}: not a model directory")
    try:
        return load_model(path)
    except (TensorFormatError, ValueError) as exc:
        raise ValidationError(f"{path}: {exc}") from None


def _sim_dir(path):
    path = Path(path)
    for name in ("c_F.ntk", "c_G.ntk", "times.csv"):
        if not (path / name).is_file():
            raise ValidationError(f"{path}: missing {name}")
    cfg = SimulationConfig.load(path / "config.json") if (path / "config.json").is_file() else None
    return path, cfg


# -- simulate -----------------------------------------------------------------------

def _simulate_one(cfg, out, species):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    res = simulate_invariants(cfg)
    outputs = {"c_F.ntk": res.c_f, "c_G.ntk": res.c_g}
    if species:
        c_a, c_b, c_c = recover_species(res.c_f, res.c_g, cfg.n_a, cfg.n_b, cfg.n_c)
        outputs.update({"c_A.ntk": c_a, "c_B.ntk": c_b, "c_C.ntk": c_c})
    for name, arr in outputs.items():
        write_tensor(out / name, arr)
    _write_times(out / "times.csv", res.times)
    cfg.dump(out / "config.json")
    sweeps = np.asarray(res.qp_sweeps)
    with open(out / "solver.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["massDrift", "meanSweeps", "maxSweeps"])
        w.writerow([_fmt(res.mass_drift), _fmt(sweeps.mean()), int(sweeps.max())])
    return sorted(list(outputs) + ["times.csv", "config.json", "solver.csv"])


def _sweep_task(args):
    cfg, out, species, argv, config = args
    man = Manifest("simulate", out, argv, config=config)
    try:
        for name in _simulate_one(cfg, out, species):
            man.output(Path(out) / name)
    except StepSolverError as exc:
        man.finish("failed", str(exc))
        return str(exc)
    man.finish("ok")
    return None


def cmd_simulate(args, argv):
    cfg = SimulationConfig.load(args.config) if args.config else SimulationConfig()
    overrides = {k: v for k, v in (("v0", args.v0), ("nodes", args.nodes), ("dt", args.dt),
                                   ("horizon", args.horizon)) if v is not None}
    cfg = SimulationConfig.from_dict({**cfg.__dict__, **overrides})
    out = Path(args.out)
    man = Manifest("simulate", out, argv, config=args.config)
    if args.config:
        man.input(args.config)
    if args.sweep_v0 is None:
        try:
            for name in _simulate_one(cfg, out, args.species):
                man.output(out / name)
        except StepSolverError as exc:
            man.finish("failed", str(exc))
            raise
        man.finish("ok")
        return EXIT_OK
    values = args.sweep_v0 or list(SWEEP_V0)
    tasks = []
    for v in values:
        sub = out / f"v0_{v:g}"
        tasks.append((replace(cfg, v0=float(v)).validate(), sub, args.species, argv, args.config))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            errors = list(pool.map(_sweep_task, tasks))
    else:
        errors = [_sweep_task(t) for t in tasks]
    for task in tasks:
        man.output(task[1] / "manifest.json")
    failed = [str(t[1]) for t, e in zip(tasks, errors) if e]
    if failed:
        man.finish("failed", "runs failed: " + ", ".join(failed))
        return EXIT_NUMERIC
    man.finish("ok")
    return EXIT_OK


# -- decompose ----------------------------------------------------------------------

def _write_clusters(path, selection):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "restart", "column", "cluster", "silhouette"])
        for k, cl in selection.clusters.items():
            N = cl.labels.shape[0]
            for i in range(N):
                for p in range(k):
                    w.writerow([k, i, p, int(cl.labels[i, p]), _fmt(cl.silhouettes[i, p])])


def _write_centroids(path, selection):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "cluster", "step", "value"])
        for k, cl in selection.clusters.items():
            for c in range(k):
                for i, v in enumerate(cl.centroids[:, c]):
                    w.writerow([k, c, i, _fmt(v)])


def cmd_decompose(args, argv):
    X = _load_tensor(args.tensor)
    if args.steps is not None:
        if not 1 <= args.steps <= X.shape[0]:
            raise ValidationError(f"--steps must lie in [1, {X.shape[0]}]")
        X = X[:args.steps]
    if np.any(X < 0) or not np.all(np.isfinite(X)):
        raise ValidationError("tensor must be finite and non-negative")
    base = NtfOptions(ranks=(1, 1, 1), max_sweeps=args.max_sweeps, tolerance=args.tol,
                      sparsity=args.sparsity)
    cfg = EnsembleConfig(restarts=args.restarts, k_range=(args.kmin, args.kmax),
                         silhouette_threshold=args.threshold, base=base, seed=args.seed,
                         spatial_ranks=tuple(args.spatial_ranks) if args.spatial_ranks else None,
                         jobs=args.jobs)
    try:
        cfg.validate(X.shape[0])
        base.validate()
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    out = Path(args.out)
    man = Manifest("decompose", out, argv, seed=args.seed)
    man.input(args.tensor)
    try:
        sel = select_k(X, cfg)
    except (ValueError, FloatingPointError) as exc:
        man.finish("failed", str(exc))
        return EXIT_NUMERIC
    out.mkdir(parents=True, exist_ok=True)
    meta = {"k": sel.k, "status": sel.status, "seed": args.seed, "sparsity": args.sparsity,
            "R": _fmt(sel.trace.final_r), "sweeps": sel.trace.sweeps,
            "objective": _fmt(sel.trace.objective)}
    save_model(out / "model", sel.model, meta)
    for name in ("core.ntk", "W.ntk", "H.ntk", "V.ntk", "metadata.txt"):
        man.output(out / "model" / name)
    write_reports(sel, man.output(out / "ensemble_runs.csv"), man.output(out / "ensemble_summary.csv"))
    _write_clusters(man.output(out / "clusters.csv"), sel)
    _write_centroids(man.output(out / "centroids.csv"), sel)
    man.finish(sel.status, None if sel.status == "ok" else "no k passed the selection rule")
    print(f"chosen k={sel.k} ({sel.status}), R={sel.trace.final_r:.4e}")
    return EXIT_OK


# -- features -------------------------------------------------------------------------

def _stoich(args, cfg):
    if args.stoich:
        return tuple(args.stoich)
    if cfg is not None:
        return cfg.n_a, cfg.n_b, cfg.n_c
    return 1.0, 1.0, 1.0


def _pair_models(args):
    sim, cfg = _sim_dir(args.sim)
    mf, mg = _load_model(args.model_f), _load_model(args.model_g)
    if mf.ranks[0] != mg.ranks[0]:
        raise ValidationError(f"models have different feature counts ({mf.ranks[0]} vs {mg.ranks[0]}); "
                              "decompose both invariants with the same --kmin/--kmax")
    if mf.dims != mg.dims:
        raise ValidationError("models have different dimensions")
    times = _read_times(sim / "times.csv")
    if mf.dims[0] > len(times):
        raise ValidationError("model has more time steps than the simulation")
    return sim, cfg, mf, mg, times


def cmd_features(args, argv):
    sim, cfg, mf, mg, times = _pair_models(args)
    n_a, n_b, n_c = _stoich(args, cfg)
    times = times[:mf.dims[0]]
    out = Path(args.out)
    man = Manifest("features", out, argv)
    for p in (args.model_f, args.model_g, sim / "times.csv"):
        man.input(p)
    fs_f, fs_g = feature_decompose(mf), feature_decompose(mg)
    pairing = pair_features(fs_f, fs_g)
    prods = product_features(fs_f, fs_g, pairing, n_a, n_b, n_c)
    out.mkdir(parents=True, exist_ok=True)
    write_feature_stats(man.output(out / "feature_stats.csv"), times, prods)
    mx, mean = transient_stats([p.c_c for p in prods])
    for name, table in (("feature_max.csv", mx), ("feature_mean.csv", mean)):
        with open(man.output(out / name), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time"] + [p.label for p in prods])
            for i, t in enumerate(times):
                w.writerow([_fmt(t)] + [_fmt(table[p, i]) for p in range(len(prods))])
    with open(man.output(out / "pairing.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["featureLabel", "fIndex", "gIndex", "similarity"])
        for p in prods:
            w.writerow([p.label, p.f_index, p.g_index, _fmt(p.similarity)])
    direct = recover_species(fs_f.total(), fs_g.total(), n_a, n_b, n_c)[2]
    summed = sum(p.c_c for p in prods)
    den = float(np.linalg.norm(direct))
    gap = float(np.linalg.norm(summed - direct)) / den if den > 0 else 0.0
    with open(man.output(out / "summary.json"), "w") as fh:
        json.dump({"k": len(prods), "labels": [p.label for p in prods],
                   "productGapRelative": gap}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    man.finish("ok")
    return EXIT_OK


# -- extrapolate -------------------------------------------------------------------------

def cmd_extrapolate(args, argv):
    sim, cfg, mf, mg, times = _pair_models(args)
    stoich = _stoich(args, cfg)
    K = mf.dims[0]
    times_train = times[:K]
    if args.horizon < 0:
        raise ValidationError("--horizon must be >= 0")
    if args.horizon == 0:
        t_future = times_train[-1:]
    else:
        dt = times_train[-1] - times_train[-2] if K > 1 else 1.0
        n = int(round(args.horizon / dt))
        if n < 1:
            raise ValidationError("--horizon is shorter than one time step")
        t_future = times_train[-1] + dt * np.arange(1, n + 1)
    out = Path(args.out)
    man = Manifest("extrapolate", out, argv)
    for p in (args.model_f, args.model_g, sim / "times.csv"):
        man.input(p)
    total, per, labels = predict_product_means(feature_decompose(mf), feature_decompose(mg),
                                               times_train, t_future, *stoich)
    true_mean = None
    F, G = read_tensor(sim / "c_F.ntk"), read_tensor(sim / "c_G.ntk")
    idx = [int(np.argmin(np.abs(times - t))) for t in t_future]
    if all(abs(times[i] - t) <= 1e-9 * max(1.0, abs(t)) for i, t in zip(idx, t_future)):
        c_c = recover_species(F[idx], G[idx], *stoich)[2]
        true_mean = c_c.reshape(len(idx), -1).mean(axis=1)
        man.input(sim / "c_F.ntk")
        man.input(sim / "c_G.ntk")
    out.mkdir(parents=True, exist_ok=True)
    write_extrapolation(man.output(out / "extrapolation.csv"), t_future, total, per, labels, true_mean)
    if true_mean is not None:
        err = float(np.linalg.norm(total - true_mean) / np.linalg.norm(true_mean))
        print(f"relative error of predicted mean C: {err:.4f}")
    man.finish("ok")
    return EXIT_OK


# -- report -------------------------------------------------------------------------------

def cmd_report(args, argv):
    X = _load_tensor(args.tensor)
    model = _load_model(args.model)
    if model.dims[1:] != X.shape[1:] or model.dims[0] > X.shape[0]:
        raise ValidationError(f"model dims {model.dims} do not fit tensor {X.shape}")
    X = X[:model.dims[0]]
    out = Path(args.out)
    man = Manifest("report", out, argv)
    man.input(args.tensor)
    man.input(args.model)
    diag = residual_diagnostics(X, model)
    rows = [("compressionRatio", compression_ratio(model, X.shape)),
            ("R", relative_error(X, reconstruct(model))),
            ("residualMean", diag.mean),
            ("residualVariance", diag.variance),
            ("residualMaxAbs", float(np.max(np.abs(diag.residual)))),
            ("residualLag1Autocorrelation", diag.lag1_autocorrelation)]
    meta = read_metadata(args.model)
    out.mkdir(parents=True, exist_ok=True)
    with open(man.output(out / "report.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        w.writerow(["ranks", meta.get("ranks", " ".join(map(str, model.ranks)))])
        for name, value in rows:
            w.writerow([name, _fmt(value)])
    man.finish("ok")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="ntfkmix", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="integrate the invariant equations")
    s.add_argument("--config", type=Path, help="flat JSON config (defaults if omitted)")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--species", action="store_true", help="also write c_A, c_B, c_C")
    s.add_argument("--v0", type=float)
    s.add_argument("--nodes", type=int)
    s.add_argument("--dt", type=float)
    s.add_argument("--horizon", type=float)
    s.add_argument("--sweep-v0", type=float, nargs="*", metavar="V0",
                   help="one run per v0 into subdirectories (no values: 1 1e-1 1e-2 1e-3 1e-4)")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("decompose", help="NTFk ensemble and selection of k")
    d.add_argument("tensor", type=Path)
    d.add_argument("--out", type=Path, required=True)
    d.add_argument("--kmin", type=int, default=2)
    d.add_argument("--kmax", type=int, default=5)
    d.add_argument("--restarts", type=int, default=50)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--spatial-ranks", type=int, nargs=2, metavar=("M", "N"))
    d.add_argument("--sparsity", type=float, default=0.0)
    d.add_argument("--max-sweeps", type=int, default=500)
    d.add_argument("--tol", type=float, default=1e-8)
    d.add_argument("--threshold", type=float, default=0.7, help="silhouette threshold")
    d.add_argument("--steps", type=int, help="use only the first STEPS time slices")
    d.add_argument("--jobs", type=int, default=1)
    d.set_defaults(func=cmd_decompose)

    for name, func, helptext in (("features", cmd_features, "product-C features and transients"),
                                 ("extrapolate", cmd_extrapolate, "blind prediction of mean C")):
        f = sub.add_parser(name, help=helptext)
        f.add_argument("--sim", type=Path, required=True, help="simulation output directory")
        f.add_argument("--model-f", type=Path, required=True)
        f.add_argument("--model-g", type=Path, required=True)
        f.add_argument("--out", type=Path, required=True)
        f.add_argument("--stoich", type=float, nargs=3, metavar=("NA", "NB", "NC"))
        if name == "extrapolate":
            f.add_argument("--horizon", type=float, default=0.0,
                           help="time beyond the last training step")
        f.set_defaults(func=func)

    r = sub.add_parser("report", help="compression ratio and residual diagnostics")
    r.add_argument("--tensor", type=Path, required=True)
    r.add_argument("--model", type=Path, required=True)
    r.add_argument("--out", type=Path, required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args, argv)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (json.JSONDecodeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except StepSolverError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
