"""Command-line interface: dataset generation, training, evaluation, sweeps.

Exit codes: 0 success, 2 configuration problems, 3 data problems, 4 numeric
failures.  Every artifact is written atomically, and each run directory gets
a manifest recording the resolved configuration, its hash, and wall time.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, inference, scm
from . import metrics as metrics_mod
from .errors import ConfigError, DataError, DagSamplerError, NumericError
from .fileio import atomic_write_json, atomic_write_text, read_json
from .graphs import ENUMERATION_CAP, GraphFamily

# named hyperparameter bundles for the benchmark grid:
# (lambda_s, scale_p, scale_theta, sparse_init, model kind)
PRESETS = {
    "linear-er-5": (50.0, 0.001, 0.001, False, "linear"),
    "linear-sf-5": (50.0, 0.01, 0.001, False, "linear"),
    "nonlinear-er-20": (300.0, 0.01, 0.01, False, "mlp"),
    "nonlinear-sf-20": (200.0, 0.1, 0.1, False, "mlp"),
    "nonlinear-er-30": (500.0, 1.0, 0.01, False, "mlp"),
    "nonlinear-sf-30": (300.0, 0.01, 0.01, False, "mlp"),
    "nonlinear-er-50": (500.0, 0.01, 0.01, True, "mlp"),
    "nonlinear-sf-50": (300.0, 0.1, 0.01, False, "mlp"),
    "nonlinear-er-70": (700.0, 0.1, 0.01, True, "mlp"),
    "nonlinear-sf-70": (300.0, 0.01, 0.01, False, "mlp"),
    "nonlinear-er-100": (700.0, 0.1, 0.01, False, "mlp"),
    "nonlinear-sf-100": (700.0, 0.1, 0.01, False, "mlp"),
    "syntren": (300.0, 0.1, 0.01, False, "mlp"),
    "sachs": (1200.0, 0.1, 0.01, False, "mlp"),
}

METRIC_NAMES = ("e_shd", "edge_f1", "nll", "mmd", "e_cpdag_shd")


def preset_overrides(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    lam, sp, st, sparse, model = PRESETS[name]
    return {
        "lambda_s": lam,
        "scale_p": sp,
        "scale_theta": st,
        "sparse_init": sparse,
        "model": model,
    }


def resolve_config(
    preset: str | None, config_path: str | None, seed: int | None, threads: int | None
) -> inference.TrainingConfig:
    """Layered resolution: defaults, then preset, then config file, then flags."""
    merged: dict = {}
    if preset:
        merged.update(preset_overrides(preset))
    if config_path:
        obj = read_json(config_path)
        if not isinstance(obj, dict):
            raise ConfigError(f"{config_path}: config must be a JSON object")
        merged.update(obj)
    if seed is not None:
        merged["seed"] = seed
    if threads is not None:
        merged["threads"] = threads
    return inference.TrainingConfig.from_dict(merged)


def config_hash(cfg: inference.TrainingConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_manifest(
    out_dir: Path,
    command: str,
    cfg,
    started: float,
    outputs: list[str],
    filename: str = "manifest.json",
    **extra,
):
    obj = {
        "command": command,
        "version": __version__,
        "config": None if cfg is None else cfg.to_dict(),
        "config_hash": None if cfg is None else config_hash(cfg),
        "wall_seconds": round(time.time() - started, 3),
        "outputs": outputs,
    }
    obj.update(extra)
    atomic_write_json(out_dir / filename, obj)


# ------------------------------------------------------------------------ gen


def default_protocol(d: int) -> tuple[int, int, int]:
    """(n_train, n_test, expected_edges) by problem size."""
    if d <= 5:
        return 500, 100, d
    return 5000, 1000, 2 * d


def cmd_gen(args) -> int:
    started = time.time()
    n_train_default, n_test_default, edges_default = default_protocol(args.d)
    n_train = args.n_train or n_train_default
    n_test = args.n_test or n_test_default
    edges = args.edges or edges_default
    rng = np.random.default_rng(args.seed)
    family = GraphFamily(kind=args.family, d=args.d, expected_edges=edges)
    G = family.sample(rng)
    truth = scm.make_ground_truth(G, args.kind, rng)
    X_train = scm.ancestral_sample(truth, n_train, rng)
    X_test = scm.ancestral_sample(truth, n_test, rng)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scm.save_dataset_csv(out / "train.csv", X_train)
    scm.save_dataset_csv(out / "test.csv", X_test)
    meta = scm.truth_to_dict(truth)
    meta.update({"family": args.family, "seed": args.seed, "n_train": n_train, "n_test": n_test})
    atomic_write_json(out / "truth.json", meta)
    write_manifest(
        out, "gen", None, started,
        [str(out / n) for n in ("train.csv", "test.csv", "truth.json")],
        seed=args.seed,
    )
    print(f"wrote {n_train}+{n_test} rows for a {args.family}-{args.d} {args.kind} model to {out}")
    return 0


# ---------------------------------------------------------------------- train


def _load_dataset_dir(path: str | Path):
    """Accept either a dataset directory or a bare training CSV."""
    p = Path(path)
    if p.is_dir():
        train = scm.load_dataset_csv(p / "train.csv")
        test = scm.load_dataset_csv(p / "test.csv") if (p / "test.csv").exists() else None
        truth = read_json(p / "truth.json") if (p / "truth.json").exists() else None
        return train, test, truth
    return scm.load_dataset_csv(p), None, None


def cmd_train(args) -> int:
    started = time.time()
    cfg = resolve_config(args.preset, args.config, args.seed, args.threads)
    X, _, _ = _load_dataset_dir(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.mode == "gibbs":
        result = inference.gibbs_train(X, cfg)
        inference.save_particles(out / "particles.json", result.buffer, cfg, phi=result.phi)
        diagnostics = result.diagnostics
    else:
        result = inference.joint_train(X, cfg)
        inference.save_particles(out / "particles.json", result.buffer, cfg, phi=None)
        diagnostics = result.diagnostics

    write_manifest(
        out, f"train --mode {args.mode}", cfg, started,
        [str(out / "particles.json")],
        data=str(args.data),
        mode=args.mode,
        stored_particles=len(result.buffer),
        nan_events=diagnostics["nan_events"],
    )
    print(
        f"stored {len(result.buffer)} particles after {diagnostics['total_steps']} steps "
        f"({args.mode} mode) in {out}"
    )
    return 0


# ----------------------------------------------------------------------- eval


def realize_samples(
    buffer: inference.ParticleBuffer,
    cfg: inference.TrainingConfig,
    phi: np.ndarray | None,
    X_train: np.ndarray,
    rng: np.random.Generator,
    draws_per_particle: int = 1,
):
    """Turn stored particles into (graph, theta) samples for either mode."""
    d = X_train.shape[1]
    model = scm.make_model(cfg.model, d, cfg.architecture(d))
    joint = any(pt.w_tilde is not None for pt in buffer)
    if joint:
        result = inference.JointResult(buffer=buffer, config=cfg, model=model, diagnostics={})
        samples = []
        for _ in range(draws_per_particle):
            samples.extend(
                inference.joint_graph_samples(result, X_train, rng, mc_samples=cfg.eval_mc_samples)
            )
        return samples, model
    if phi is None:
        raise DataError("particle file has neither mask logits nor a mask network")
    vi = inference.make_vi(d, cfg.phi_hidden)
    result = inference.GibbsResult(
        buffer=buffer, phi=phi, vi=vi, config=cfg, model=model, diagnostics={}
    )
    return inference.posterior_graph_samples(result, rng, draws_per_particle), model


def _select_metrics(arg: str | None) -> set[str]:
    if not arg:
        return set(METRIC_NAMES)
    names = {m.strip() for m in arg.split(",") if m.strip()}
    unknown = names - set(METRIC_NAMES)
    if unknown:
        raise ConfigError(f"unknown metrics {sorted(unknown)}; choose from {METRIC_NAMES}")
    return names


def _eval_one(run_dir: Path, data: str, wanted: set[str], seed: int, draws: int):
    particles_path = run_dir / "particles.json" if run_dir.is_dir() else run_dir
    buffer, cfg, phi = inference.load_particles(particles_path)
    if len(buffer) == 0:
        raise DataError(f"{particles_path}: no stored particles")
    X_train, X_test, truth = _load_dataset_dir(data)
    if truth is None:
        raise DataError(f"{data}: truth.json is required for evaluation")
    G_true = np.asarray(truth["adjacency"], dtype=np.int64)
    d = len(G_true)
    rng = np.random.default_rng(seed)
    samples, model = realize_samples(buffer, cfg, phi, X_train, rng, draws)

    reference = None
    if "mmd" in wanted and d <= ENUMERATION_CAP:
        post = metrics_mod.true_posterior(X_train)
        reference = post.sample(rng, max(200, len(samples)))
    report = metrics_mod.build_report(
        samples,
        G_true,
        model=model if ("nll" in wanted and X_test is not None) else None,
        X_test=X_test if "nll" in wanted else None,
        reference_graphs=reference,
        with_cpdag="e_cpdag_shd" in wanted,
    )
    if "e_shd" not in wanted:
        report.e_shd = None
    if "edge_f1" not in wanted:
        report.edge_f1 = None
    return report


def cmd_eval(args) -> int:
    started = time.time()
    wanted = _select_metrics(args.metrics)
    run = Path(args.run)
    multi = run.is_dir() and not (run / "particles.json").exists()
    if not multi:
        report = _eval_one(run, args.data, wanted, args.seed or 0, args.draws)
        out = Path(args.out) if args.out else (run if run.is_dir() else run.parent) / "report.json"
        report.save(out)
        if run.is_dir():
            write_manifest(
                run, "eval", None, started, [str(out)],
                filename="eval_manifest.json", data=str(args.data),
            )
        print(json.dumps(report.to_dict()))
        return 0

    # directory of runs: per-run reports plus a delimited aggregate
    run_dirs = sorted(p for p in run.iterdir() if (p / "particles.json").exists())
    if not run_dirs:
        raise DataError(f"{run}: no run directories with particles.json found")
    rows = []
    for rd in run_dirs:
        report = _eval_one(rd, args.data, wanted, args.seed or 0, args.draws)
        report.save(rd / "report.json")
        rows.append((rd.name, report))
    out = Path(args.out) if args.out else run / "aggregate.csv"
    _write_aggregate_csv(out, rows)
    write_manifest(
        run, "eval", None, started, [str(out)],
        filename="eval_manifest.json", data=str(args.data),
    )
    print(f"evaluated {len(rows)} runs into {out}")
    return 0


def _write_aggregate_csv(path: Path, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["run"] + list(METRIC_NAMES) + ["n_samples"])
    table = {m: [] for m in METRIC_NAMES}
    for name, report in rows:
        d = report.to_dict()
        writer.writerow(
            [name]
            + [("" if d[m] is None or d[m] != d[m] else repr(d[m])) for m in METRIC_NAMES]
            + [d["n_samples"]]
        )
        for m in METRIC_NAMES:
            if d[m] is not None and d[m] == d[m]:
                table[m].append(d[m])

    def agg(fn):
        out = []
        for m in METRIC_NAMES:
            vals = table[m]
            out.append(repr(float(fn(vals))) if vals else "")
        return out

    writer.writerow(["mean"] + agg(np.mean) + [""])
    writer.writerow(
        ["ci95"]
        + [
            repr(float(1.96 * np.std(table[m], ddof=1) / np.sqrt(len(table[m]))))
            if len(table[m]) > 1
            else ""
            for m in METRIC_NAMES
        ]
        + [""]
    )
    atomic_write_text(path, buf.getvalue())


# ------------------------------------------------------------- true posterior


def cmd_true_posterior(args) -> int:
    started = time.time()
    X_train, _, _ = _load_dataset_dir(args.data)
    d = X_train.shape[1]
    if d > ENUMERATION_CAP:
        raise ConfigError(
            f"exact posterior enumeration is capped at d={ENUMERATION_CAP}, got d={d}"
        )
    post = metrics_mod.true_posterior(X_train, edge_penalty=args.edge_penalty)
    out = Path(args.out)
    obj = {
        "d": int(d),
        "graphs": [G.tolist() for G in post.graphs],
        "log_probs": post.log_probs.tolist(),
        "edge_marginals": post.edge_marginals().tolist(),
    }
    atomic_write_json(out, obj)
    top = post.graphs[int(np.argmax(post.log_probs))]
    print(f"{len(post.graphs)} DAGs scored; MAP graph has {int(top.sum())} edges; wrote {out}")
    return 0


# ----------------------------------------------------------------------- sweep


def cmd_sweep(args) -> int:
    started = time.time()
    spec = read_json(args.spec)
    if not isinstance(spec, dict) or "jobs" not in spec or not isinstance(spec["jobs"], list):
        raise ConfigError(f"{args.spec}: sweep spec must be an object with a 'jobs' list")
    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    wanted = _select_metrics(args.metrics)
    rows = []
    for job in spec["jobs"]:
        if "name" not in job or "data" not in job:
            raise ConfigError("every sweep job needs 'name' and 'data'")
        seeds = job.get("seeds", [0])
        mode = job.get("mode", "gibbs")
        if mode not in ("gibbs", "joint"):
            raise ConfigError(f"job {job['name']}: mode must be gibbs or joint")
        merged: dict = {}
        if job.get("preset"):
            merged.update(preset_overrides(job["preset"]))
        merged.update(job.get("config", {}))
        for seed in seeds:
            merged_seed = dict(merged, seed=int(seed))
            if args.threads is not None:
                merged_seed["threads"] = args.threads
            cfg = inference.TrainingConfig.from_dict(merged_seed)
            run_dir = out_root / job["name"] / f"seed-{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            X, _, _ = _load_dataset_dir(job["data"])
            t0 = time.time()
            if mode == "gibbs":
                result = inference.gibbs_train(X, cfg)
                inference.save_particles(run_dir / "particles.json", result.buffer, cfg, phi=result.phi)
            else:
                result = inference.joint_train(X, cfg)
                inference.save_particles(run_dir / "particles.json", result.buffer, cfg, phi=None)
            write_manifest(
                run_dir, f"sweep:{job['name']}", cfg, t0,
                [str(run_dir / "particles.json")],
                data=str(job["data"]), mode=mode,
            )
            report = _eval_one(run_dir, job["data"], wanted, int(seed), args.draws)
            report.save(run_dir / "report.json")
            rows.append((f"{job['name']}/seed-{seed}", report))
            print(f"{job['name']} seed {seed}: e_shd={report.e_shd:.3f} f1={report.edge_f1:.3f}")
    _write_aggregate_csv(out_root / "aggregate.csv", rows)
    write_manifest(out_root, "sweep", None, started, [str(out_root / "aggregate.csv")])
    return 0


# ----------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dagsampler",
        description="Posterior sampling over DAGs and mechanism parameters.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset directory")
    p.add_argument("--kind", choices=("linear", "mlp"), default="linear")
    p.add_argument("--family", choices=("er", "sf"), default="er")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--edges", type=int, default=None, help="expected edge count")
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="run posterior sampling on a dataset")
    p.add_argument("--data", required=True, help="dataset directory or training CSV")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--preset", default=None, help=f"one of {sorted(PRESETS)}")
    p.add_argument("--mode", choices=("gibbs", "joint"), default="gibbs")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compute metrics for one run or a directory of runs")
    p.add_argument("--run", required=True, help="run directory, particles.json, or parent of runs")
    p.add_argument("--data", required=True, help="dataset directory with truth.json")
    p.add_argument("--metrics", default=None, help=f"comma list from {METRIC_NAMES}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--draws", type=int, default=1, help="graph draws per stored particle")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("true-posterior", help="exact posterior by enumeration (small d)")
    p.add_argument("--data", required=True)
    p.add_argument("--edge-penalty", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_true_posterior)

    p = sub.add_parser("sweep", help="batch of train+eval jobs from a JSON spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--metrics", default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--draws", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return int(args.func(args) or 0)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except DagSamplerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
