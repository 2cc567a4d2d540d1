"""Runners behind the acceptance suite.

Each runner writes its CSV outputs into ``out`` and returns an ``Outcome``.
The determinism check calls every runner twice and compares the files.
"""
from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from qpatdot.adjoint import evaluate, gradient_check
from qpatdot.config import PRESETS, preset
from qpatdot.fields import PHANTOMS
from qpatdot.forward import compatibility_residual, generate_dataset, internal_data
from qpatdot.objective import ObjectiveConfig
from qpatdot.pipeline import (
    forward_densities,
    gamma_sensitivity_experiment,
    initial_guess,
    make_truth,
    run_single_stage,
    run_three_stage,
    stage1_boundary_gamma,
    stage3_gamma_big,
)


@dataclass
class Outcome:
    passed: bool
    detail: str
    runtime: float = 0.0
    limit: float | None = None  # seconds
    extra: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.passed and (self.limit is None or self.runtime <= self.limit)


def write_rows(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in r])


def _twin(name, **kw):
    cfg = preset(name, **{"noise_level": 0.0, **kw})
    truth = make_truth(cfg)
    return cfg, truth, generate_dataset(cfg, truth)


def _vals(truth):
    s, g, G = truth
    return g.values, s.values, G.values


def adjoint_gradients(out: Path) -> Outcome:
    t0 = time.perf_counter()
    cfg, truth, data = _twin("small", kappa=0.2)
    sigma0, gamma0, Gamma0 = initial_guess(truth, cfg)
    rows, worst = [], {}
    for term in ("pat", "dot", "total", "reg"):
        tol = 1e-8 if term == "reg" else 1e-4
        for r in gradient_check(term, gamma0, sigma0, Gamma0, data, cfg.objective, seed=0, n_directions=5):
            rows.append([term, r["coefficient"], r["direction"], r["adjoint"], r["fd"], r["rel_error"], tol])
            worst[term] = max(worst.get(term, 0.0), r["rel_error"])
    write_rows(out / "gradcheck.csv", ["term", "coefficient", "direction", "adjoint", "fd", "rel_error", "tol"], rows)
    passed = all(r[5] <= r[6] for r in rows)
    detail = ", ".join(f"{t} {e:.1e}" for t, e in worst.items())
    return Outcome(passed, f"worst relative error {detail}", time.perf_counter() - t0, 120)


def zero_residual(out: Path) -> Outcome:
    # data misfits vanish at the truth; the Tikhonov term does not involve the data
    t0 = time.perf_counter()
    rows, passed = [], True
    for kappa in (0.0, 0.2):
        cfg, truth, data = _twin("small", kappa=kappa)
        sigma0, gamma0, Gamma0 = initial_guess(truth, cfg)
        for variant in ("fixed-reference", "full-pairs", "ratio"):
            obj = ObjectiveConfig(beta_gamma=0.0, beta_sigma=0.0, pat_variant=variant)
            _, parts, g = evaluate(*_vals(truth), data, obj)
            _, _, g_ref = evaluate(gamma0.values, sigma0.values, Gamma0.values, data, obj)
            scale = max(np.abs(g_ref.d_gamma).max(), np.abs(g_ref.d_sigma).max())
            gmax = max(np.abs(g.d_gamma).max(), np.abs(g.d_sigma).max())
            ok = parts["pat"] <= 1e-12 and parts["dot"] <= 1e-12 and gmax <= 1e-10 * scale
            passed &= ok
            rows.append([kappa, variant, parts["pat"], parts["dot"], gmax / scale, int(ok)])
    write_rows(out / "zero_residual.csv", ["kappa", "pat_variant", "pat", "dot", "grad_ratio", "pass"], rows)
    worst_term = max(max(r[2], r[3]) for r in rows)
    worst_grad = max(r[4] for r in rows)
    return Outcome(passed, f"largest misfit {worst_term:.1e}, largest gradient ratio {worst_grad:.1e}",
                   time.perf_counter() - t0, 60)


def compatibility(out: Path) -> Outcome:
    t0 = time.perf_counter()
    cfg, (sigma, gamma, Gamma), data = _twin("small", kappa=0.2)
    w0 = data.zero_frequency_index()
    rows = []
    for j in range(data.n_sources):
        res = compatibility_residual(data.mesh, data.H[j], Gamma, data.J[j, w0])
        ref = data.space.integrate(data.H[j] / Gamma.values)
        rows.append([j, res, ref, abs(res) / ref])
    write_rows(out / "compatibility.csv", ["source", "residual", "integral_H_over_Gamma", "relative"], rows)
    worst = max(r[3] for r in rows)
    return Outcome(worst <= 1e-10, f"worst relative residual {worst:.1e}", time.perf_counter() - t0, 60)


def boundary_recovery(out: Path) -> Outcome:
    t0 = time.perf_counter()
    rows, parts, passed = [], [], True
    for kappa, tol, share in ((0.0, 0.02, 0.95), (0.2, 0.05, 1.0)):
        cfg, truth, data = _twin("medium", kappa=kappa, gamma_constant=0.03)
        est = stage1_boundary_gamma(data, cfg.stage1_pair, cfg.stage1_candidates)
        err = np.abs(est / 0.03 - 1)
        frac = float(np.mean(err <= tol))
        passed &= frac >= share
        rows += [[kappa, d, float(e), float(r)] for d, (e, r) in enumerate(zip(est, err))]
        parts.append(f"kappa={kappa}: {100 * frac:.0f}% within {100 * tol:.0f}% (max {err.max():.1e})")
    write_rows(out / "boundary_trace.csv", ["kappa", "detector", "gamma", "rel_error"], rows)
    return Outcome(passed, "; ".join(parts), time.perf_counter() - t0, 180)


def stage3_exact(out: Path) -> Outcome:
    t0 = time.perf_counter()
    rows = []
    for name in PRESETS:
        for phantom in PHANTOMS:
            cfg = preset(name, phantom=phantom, noise_level=0.0)
            sigma, gamma, Gamma = make_truth(cfg)
            data = generate_dataset(cfg, (sigma, gamma, Gamma))
            U = forward_densities(data, gamma, sigma)
            data = dataclasses.replace(data, H=internal_data(Gamma.values, sigma.values, U))
            rec = stage3_gamma_big(data, sigma, U)
            rows.append([name, phantom, float(np.max(np.abs(rec - Gamma.values) / Gamma.values))])
    write_rows(out / "stage3.csv", ["preset", "phantom", "max_rel_error"], rows)
    worst = max(r[2] for r in rows)
    return Outcome(worst <= 1e-13, f"worst relative error {worst:.1e} over {len(rows)} cases",
                   time.perf_counter() - t0, 120)


def gamma_independence(out: Path) -> Outcome:
    t0 = time.perf_counter()
    rep = gamma_sensitivity_experiment(preset("medium", noise_level=0.0))
    rep.save(out)
    s, g = rep.norms["sigma_reldiff_linf"], rep.norms["gamma_reldiff_linf"]
    return Outcome(s <= 0.05 and g <= 0.05, f"Linf relative difference sigma {s:.2e}, gamma {g:.2e}",
                   time.perf_counter() - t0, 900)


def _monotone(result) -> bool:
    return all(np.all(np.diff([h["f"] for h in hist]) <= 0) for hist in result.histories.values())


def experiment_one(out: Path) -> Outcome:
    cfg = preset("medium", noise_level=0.0)
    res = run_three_stage(cfg)
    res.save(out)
    e = {k: v[0] for k, v in res.errors().items()}
    passed = e["sigma"] <= 0.10 and e["gamma"] <= 0.10 and e["Gamma"] <= 0.15 and e["product_GammaSigma"] < e["Gamma"]
    detail = (f"rel L2 sigma {e['sigma']:.2%}, gamma {e['gamma']:.2%}, Gamma {e['Gamma']:.2%}, "
              f"Gamma*sigma {e['product_GammaSigma']:.2%}")
    return Outcome(passed, detail, res.wall_time, 1200, {"result": res})


def noise_robustness(out: Path) -> Outcome:
    t0 = time.perf_counter()
    runs = {}
    for tag, level in (("clean", 0.0), ("noisy", 0.05)):
        res = run_three_stage(preset("medium", phantom="piecewise", noise_level=level))
        res.save(out / tag)
        runs[tag] = res
    clean = {k: v[0] for k, v in runs["clean"].errors().items()}
    noisy = {k: v[0] for k, v in runs["noisy"].errors().items()}
    keys = ("sigma", "gamma", "Gamma")
    ratios = {k: noisy[k] / clean[k] for k in keys}
    mono = _monotone(runs["noisy"])
    passed = all(r <= 2.0 for r in ratios.values()) and mono
    detail = ", ".join(f"{k} {noisy[k]:.2%} vs {clean[k]:.2%}" for k in keys) + f"; monotone history {mono}"
    return Outcome(passed, detail, runs["noisy"].wall_time, 1200)


def baseline_comparison(out: Path, three=None) -> Outcome:
    cfg = preset("medium", noise_level=0.0)
    if three is None:
        three = run_three_stage(cfg)
        three.save(out / "three_stage")
    single = run_single_stage(cfg)
    single.save(out / "single_stage")
    e3 = {k: v[0] for k, v in three.errors().items()}
    e1 = {k: v[0] for k, v in single.errors().items()}
    r3 = three.objective["final"] / three.objective["initial"]
    r1 = single.objective["final"] / single.objective["initial"]
    keys = ("sigma", "gamma", "Gamma")
    passed = all(e3[k] <= e1[k] for k in keys) and r3 <= r1
    detail = ", ".join(f"{k} {e3[k]:.2%} vs {e1[k]:.2%}" for k in keys) + f"; objective ratio {r3:.1e} vs {r1:.1e}"
    return Outcome(passed, detail, three.wall_time + single.wall_time, 2400)


RUNNERS = {
    1: ("adjoint gradients match finite differences", adjoint_gradients),
    2: ("zero residual at the truth", zero_residual),
    3: ("compatibility identity", compatibility),
    4: ("boundary gamma recovery", boundary_recovery),
    5: ("exact algebraic Gruneisen inversion", stage3_exact),
    6: ("Gruneisen independence of the joint fit", gamma_independence),
    7: ("Gaussian-mixture three-stage errors", experiment_one),
    8: ("noise robustness", noise_robustness),
    9: ("three-stage against single-stage", baseline_comparison),
}
