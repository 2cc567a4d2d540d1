"""``qpatdot generate|reconstruct|gradcheck|report``."""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_SOLVER = 5
EXIT_OPTIMIZER = 6

THREADS_ENV = "QPATDOT_THREADS"
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

log = logging.getLogger("qpatdot")


class CompatibilityError(ValueError):
    pass


def _limit_threads(n: int | None) -> None:
    # must run before numpy/scipy load their BLAS
    if n is None:
        env = os.environ.get(THREADS_ENV)
        n = int(env) if env else None
    if n is not None:
        if n < 1:
            raise ValueError("--threads must be >= 1")
        for var in _THREAD_VARS:
            os.environ[var] = str(n)


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_manifest(out: Path, command: str, cfg, extra: dict) -> None:
    from . import __version__
    from .config import dump_config

    manifest = {
        "command": command,
        "version": __version__,
        "config": dump_config(cfg) if cfg is not None else None,
        "seed": getattr(cfg, "seed", None),
        **extra,
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _check_compatible(cfg, data) -> None:
    import numpy as np

    diffs = []
    if cfg.n != data.mesh.n:
        diffs.append(f"n (config {cfg.n}, data {data.mesh.n})")
    if cfg.kappa != data.kappa:
        diffs.append(f"kappa (config {cfg.kappa}, data {data.kappa})")
    if cfg.n_sources != data.n_sources:
        diffs.append(f"n_sources (config {cfg.n_sources}, data {data.n_sources})")
    if len(cfg.omegas) != data.n_freq or not np.allclose(cfg.omegas, data.omegas, rtol=0, atol=0):
        diffs.append(f"omegas (config {list(cfg.omegas)}, data {list(map(float, data.omegas))})")
    if diffs:
        raise CompatibilityError("dataset does not match config: " + "; ".join(diffs))


# commands -----------------------------------------------------------------


def cmd_generate(args) -> int:
    from .config import load_config
    from .forward import save_dataset
    from .pipeline import generate_dataset, make_truth

    cfg = load_config(args.config)
    started = _now()
    truth = make_truth(cfg)
    data = generate_dataset(cfg, truth)
    data.meta["phantom"] = cfg.phantom
    out = Path(args.out)
    save_dataset(data, out)
    _write_manifest(out, "generate", cfg, {"started": started, "finished": _now()})
    print(f"wrote {data.n_sources} H files and {data.n_sources * data.n_freq} J files to {out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from .config import load_config
    from .forward import load_dataset
    from .pipeline import make_truth, run_single_stage, run_three_stage

    cfg = load_config(args.config)
    data = load_dataset(args.data)
    _check_compatible(cfg, data)
    truth = make_truth(cfg)
    started = _now()
    runner = run_three_stage if args.method == "three-stage" else run_single_stage
    result = runner(cfg, dataset=data, truth=truth)
    out = result.save(args.out)
    _write_manifest(out, "reconstruct", cfg, {
        "method": args.method, "dataset": str(Path(args.data).resolve()), "phantom": cfg.phantom,
        "started": started, "finished": _now(), "wall_time_s": result.wall_time, "statuses": result.statuses,
    })
    for name, (l2, linf) in result.errors().items():
        print(f"{name:>20s}  rel L2 {l2:.4e}  rel Linf {linf:.4e}")
    if any(s == "line_search_failed" for s in result.statuses.values()):
        print("optimizer stopped early: line search failed (partial result written)", file=sys.stderr)
        return EXIT_OPTIMIZER
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .adjoint import GRADCHECK_TERMS, gradient_check
    from .config import load_config
    from .pipeline import generate_dataset, initial_guess, make_truth

    cfg = load_config(args.config)
    if args.n is not None:
        cfg = cfg.replace(n=args.n)
    truth = make_truth(cfg)
    data = generate_dataset(cfg.replace(noise_level=0.0), truth)
    sigma0, gamma0, Gamma0 = initial_guess(truth, cfg)
    terms = GRADCHECK_TERMS if args.term == "all" else (args.term,)
    rows = []
    for seed in range(args.seeds):
        for term in terms:
            for row in gradient_check(term, gamma0, sigma0, Gamma0, data, cfg.objective, seed=seed,
                                      n_directions=args.directions):
                tol = 1e-8 if term == "reg" else 1e-4
                rows.append({**row, "seed": seed, "tolerance": tol, "pass": row["rel_error"] <= tol})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    keys = ["term", "coefficient", "seed", "direction", "adjoint", "fd", "rel_error", "tolerance", "pass"]
    with open(out / "gradcheck.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow([f"{r[k]:.17g}" if isinstance(r[k], float) else r[k] for k in keys])
    _write_manifest(out, "gradcheck", cfg, {"terms": list(terms), "seeds": args.seeds, "finished": _now()})
    failed = [r for r in rows if not r["pass"]]
    worst = {t: max(r["rel_error"] for r in rows if r["term"] == t) for t in terms}
    for t, e in worst.items():
        print(f"{t:>6s}  worst relative error {e:.3e}")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def _read_summary(directory: Path) -> dict:
    path = directory / "summary.csv"
    if not path.exists():
        raise FileNotFoundError(f"missing summary: {path}")
    with open(path, newline="") as fh:
        return {row["quantity"]: row["value"] for row in csv.DictReader(fh)}


def _read_manifest(directory: Path) -> dict:
    path = directory / "run_manifest.json"
    return json.loads(path.read_text()) if path.exists() else {}


def cmd_report(args) -> int:
    dirs = [Path(d) for d in args.results]
    summaries = [_read_summary(d) for d in dirs]
    manifests = [_read_manifest(d) for d in dirs]
    phantoms = [m.get("phantom", "") for m in manifests]
    mismatch = len({p for p in phantoms if p}) > 1
    quantities = []
    for s in summaries:
        quantities += [q for q in s if q not in quantities]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "method", "phantom", "warning"] + quantities)
        for d, s, m, p in zip(dirs, summaries, manifests, phantoms):
            warning = "phantom mismatch" if mismatch else ""
            w.writerow([str(d), m.get("method", ""), p, warning] + [s.get(q, "") for q in quantities])
    if args.histories:
        _merge_histories(dirs, Path(args.histories))
    if mismatch:
        print("warning: runs use different phantoms", file=sys.stderr)
    print(f"wrote {out}")
    return EXIT_OK


def _merge_histories(dirs, out: Path) -> None:
    """Objective histories of all runs side by side, one column per run and stage."""
    columns = {}
    for d in dirs:
        for path in sorted(d.glob("history_*.csv")):
            with open(path, newline="") as fh:
                columns[f"{d.name}:{path.stem[len('history_'):]}"] = [r["objective"] for r in csv.DictReader(fh)]
    length = max((len(v) for v in columns.values()), default=0)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter"] + list(columns))
        for i in range(length):
            w.writerow([i] + [v[i] if i < len(v) else "" for v in columns.values()])


# entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qpatdot", description="Coupled DOT and quantitative PAT reconstructions.")
    p.add_argument("--threads", type=int, default=None,
                   help=f"cap BLAS/OpenMP worker threads (default: ${THREADS_ENV} or library default)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesise a dataset")
    g.add_argument("config")
    g.add_argument("out")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("reconstruct", help="reconstruct from a dataset")
    r.add_argument("config")
    r.add_argument("data")
    r.add_argument("out")
    r.add_argument("--method", choices=("three-stage", "single-stage"), default="three-stage")
    r.set_defaults(func=cmd_reconstruct)

    c = sub.add_parser("gradcheck", help="adjoint gradients against finite differences")
    c.add_argument("config")
    c.add_argument("out")
    c.add_argument("--term", choices=("pat", "dot", "reg", "total", "all"), default="all")
    c.add_argument("--n", type=int, default=None, help="override nodes per side")
    c.add_argument("--seeds", type=int, default=1, help="number of direction seeds")
    c.add_argument("--directions", type=int, default=5, help="directions per coefficient and seed")
    c.set_defaults(func=cmd_gradcheck)

    m = sub.add_parser("report", help="merge result summaries into one table")
    m.add_argument("results", nargs="+")
    m.add_argument("--out", default="report.csv")
    m.add_argument("--histories", default=None, help="also write merged objective histories here")
    m.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _limit_threads(args.threads)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    from .config import ConfigError
    from .forward import SolverError
    from .objective import InvalidDataError
    from .pipeline import DegenerateDataError, StageError

    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CompatibilityError, InvalidDataError, DegenerateDataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc.cause, SolverError):
            return EXIT_SOLVER
        if isinstance(exc.cause, (InvalidDataError, DegenerateDataError)):
            return EXIT_DATA
        return EXIT_OPTIMIZER
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
