"""BFGS with a Wolfe line search and positivity floors."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class OptimizerSettings:
    grad_tol: float = 1e-9
    max_iter: int = 200
    c1: float = 1e-4  # sufficient decrease
    c2: float = 0.9  # curvature
    max_line_search: int = 30
    dense_limit: int = 4000  # above this many unknowns use limited memory
    memory: int = 20
    rescale_initial: bool = True

    def __post_init__(self):
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("need 0 < c1 < c2 < 1")
        if self.max_iter < 0:
            raise ValueError("max_iter must be >= 0")


@dataclass
class OptimResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    status: str
    n_iter: int
    n_eval: int
    history: list = field(default_factory=list)
    projections: int = 0

    @property
    def history_array(self) -> np.ndarray:
        return np.array([(h["iter"], h["f"], h["grad_inf_norm"], h["step_length"]) for h in self.history])


def project_positive(x: np.ndarray, floors) -> np.ndarray:
    """Componentwise ``max(x, floors)``; ``floors=None`` is the identity."""
    if floors is None:
        return x
    return np.maximum(x, floors)


def _cubic_min(a, fa, da, b, fb, db):
    """Minimiser of the cubic interpolating (f, f') at a and b, or None."""
    d1 = da + db - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - da * db
    if disc < 0:
        return None
    d2 = math.copysign(math.sqrt(disc), b - a)
    denom = db - da + 2.0 * d2
    if denom == 0:
        return None
    return b - (b - a) * (db + d2 - d1) / denom


class _LineFunction:
    def __init__(self, fg, x, d, floors):
        self.fg, self.x, self.d, self.floors = fg, x, d, floors
        self.evals = 0
        self.projected = False

    def __call__(self, alpha):
        trial = self.x + alpha * self.d
        xp = project_positive(trial, self.floors)
        if self.floors is not None and np.any(xp != trial):
            self.projected = True
        f, g = self.fg(xp)
        self.evals += 1
        return xp, f, g, float(g @ self.d)


def wolfe_search(line: _LineFunction, f0, dphi0, settings: OptimizerSettings, alpha1=1.0):
    """Bracketing plus zoom with cubic interpolation. Returns the accepted
    ``(alpha, x, f, g)`` or ``None``."""
    c1, c2 = settings.c1, settings.c2
    a_prev, f_prev, d_prev = 0.0, f0, dphi0
    alpha = alpha1
    best = None
    for k in range(settings.max_line_search):
        x, f, g, d = line(alpha)
        if not np.isfinite(f):
            alpha = 0.5 * (a_prev + alpha)
            continue
        if f < f0 and (best is None or f < best[2]):
            best = (alpha, x, f, g)
        if f > f0 + c1 * alpha * dphi0 or (k > 0 and f >= f_prev):
            return _zoom(line, f0, dphi0, a_prev, f_prev, d_prev, alpha, f, d, settings, best)
        if abs(d) <= -c2 * dphi0:
            return alpha, x, f, g
        if d >= 0:
            return _zoom(line, f0, dphi0, alpha, f, d, a_prev, f_prev, d_prev, settings, (alpha, x, f, g))
        a_prev, f_prev, d_prev = alpha, f, d
        alpha *= 2.0
    return best


def _zoom(line, f0, dphi0, lo, flo, dlo, hi, fhi, dhi, settings, best):
    c1, c2 = settings.c1, settings.c2
    for _ in range(settings.max_line_search):
        a = _cubic_min(lo, flo, dlo, hi, fhi, dhi)
        left, right = min(lo, hi), max(lo, hi)
        margin = 0.1 * (right - left)
        if a is None or not (left + margin <= a <= right - margin):
            a = 0.5 * (lo + hi)
        x, f, g, d = line(a)
        if np.isfinite(f) and f < f0 and (best is None or f < best[2]):
            best = (a, x, f, g)
        if not np.isfinite(f) or f > f0 + c1 * a * dphi0 or f >= flo:
            hi, fhi, dhi = a, f if np.isfinite(f) else 1e300, d if np.isfinite(d) else 0.0
        else:
            if abs(d) <= -c2 * dphi0:
                return a, x, f, g
            if d * (hi - lo) >= 0:
                hi, fhi, dhi = lo, flo, dlo
            lo, flo, dlo = a, f, d
        if abs(hi - lo) <= 1e-14 * max(1.0, abs(lo)):
            break
    return best


class _InverseHessian:
    """Dense BFGS inverse Hessian or L-BFGS pairs behind one interface."""

    def __init__(self, n, diag, settings: OptimizerSettings, base=None):
        self.dense = n <= settings.dense_limit
        self.diag = np.broadcast_to(np.asarray(diag, dtype=float), (n,)).copy()
        self.base = base  # optional symmetric positive definite H0, (n, n) array
        self.factor = 1.0
        self.memory = settings.memory
        self.pairs: list[tuple[np.ndarray, np.ndarray, float]] = []
        if self.dense:
            self.H = np.array(base, dtype=float) if base is not None else np.diag(self.diag)
        else:
            self.H = None

    def _apply0(self, q):
        if self.base is not None:
            return self.factor * (self.base @ q)
        return self.diag * q

    def rescale(self, s, y):
        """Scale H0 so that it matches the curvature seen along ``s``."""
        Hy = self._apply0(y) if not self.dense else self.H @ y
        gamma = (s @ y) / (y @ Hy)
        self.diag = self.diag * gamma
        self.factor *= gamma
        if self.dense:
            self.H = self.H * gamma

    def apply(self, g):
        if self.dense:
            return self.H @ g
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(self.pairs):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        r = self._apply0(q)
        for (s, y, rho), a in zip(self.pairs, reversed(alphas)):
            b = rho * (y @ r)
            r += s * (a - b)
        return r

    def update(self, s, y) -> bool:
        sy = s @ y
        if not sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            return False  # curvature condition violated; keep the old approximation
        rho = 1.0 / sy
        if self.dense:
            Hy = self.H @ y
            yHy = y @ Hy
            self.H += (rho * rho * yHy + rho) * np.outer(s, s) - rho * (np.outer(Hy, s) + np.outer(s, Hy))
        else:
            self.pairs.append((s, y, rho))
            if len(self.pairs) > self.memory:
                self.pairs.pop(0)
        return True


def _free_variables(x, g, floors):
    """Mask of variables not held at their floor by a gradient pointing down."""
    if floors is None:
        return np.ones(len(x), dtype=bool)
    floors = np.broadcast_to(floors, x.shape)
    at_floor = x <= floors + 1e-12 * np.maximum(1.0, np.abs(floors))
    return ~(at_floor & (g > 0))


def _inf_norm(g, free) -> float:
    return float(np.max(np.abs(np.where(free, g, 0.0)), initial=0.0))


def bfgs_minimize(f, g, x0, settings: OptimizerSettings | None = None, floors=None,
                  initial_diag=1.0, callback=None, initial_inverse=None) -> OptimResult:
    """Minimise ``f`` with gradient ``g``.

    If ``g`` is None, ``f`` must return ``(value, gradient)``. Trial points are
    projected onto ``x >= floors`` before evaluation. Variables sitting on a
    floor whose gradient pushes them further down are frozen for the step,
    and convergence is measured on the remaining (projected) gradient.

    ``initial_inverse`` (a dense symmetric positive definite matrix) replaces
    the diagonal ``initial_diag`` as the starting inverse Hessian, which is
    how a smoothing preconditioner is supplied.
    """
    settings = settings or OptimizerSettings()
    if g is None:
        fg = f
    else:
        def fg(x):
            return f(x), g(x)

    x = project_positive(np.asarray(x0, dtype=float).copy(), floors)
    fx, gx = fg(x)
    gx = np.asarray(gx, dtype=float)
    if not np.isfinite(fx) or not np.all(np.isfinite(gx)):
        raise ValueError("objective or gradient is not finite at the starting point")
    n_eval = 1
    free = _free_variables(x, gx, floors)
    hist = [{"iter": 0, "f": float(fx), "grad_inf_norm": _inf_norm(gx, free),
             "step_length": 0.0, "status": "start"}]
    Hinv = _InverseHessian(len(x), initial_diag, settings, initial_inverse)
    fresh = True  # Hinv holds no curvature information yet
    status = "max_iter"
    projections = 0
    k = 0
    while True:
        free = _free_variables(x, gx, floors)
        gfree = np.where(free, gx, 0.0)
        if _inf_norm(gx, free) <= settings.grad_tol:
            status = "converged"
            break
        if k >= settings.max_iter:
            status = "max_iter"
            break
        d = np.where(free, -Hinv.apply(gfree), 0.0)
        dphi0 = float(gx @ d)
        if not dphi0 < 0:
            Hinv, fresh = _InverseHessian(len(x), initial_diag, settings, initial_inverse), True
            d = np.where(free, -Hinv.apply(gfree), 0.0)
            dphi0 = float(gx @ d)
        line = _LineFunction(fg, x, d, floors)
        found = wolfe_search(line, fx, dphi0, settings)
        n_eval += line.evals
        if found is None and not fresh:
            # stale curvature model: retry once along the scaled steepest descent
            log.debug("iteration %d: line search failed, restarting the quasi-Newton model", k + 1)
            Hinv, fresh = _InverseHessian(len(x), initial_diag, settings, initial_inverse), True
            d = np.where(free, -Hinv.apply(gfree), 0.0)
            dphi0 = float(gx @ d)
            line = _LineFunction(fg, x, d, floors)
            found = wolfe_search(line, fx, dphi0, settings)
            n_eval += line.evals
        if found is None:
            status = "line_search_failed"
            break
        alpha, x_new, f_new, g_new = found
        g_new = np.asarray(g_new, dtype=float)
        if line.projected:
            projections += 1
            log.debug("iteration %d: positivity floor active", k + 1)
        s = x_new - x
        y = g_new - gx
        if fresh and settings.rescale_initial and (s @ y) > 0:
            Hinv.rescale(s, y)
        if Hinv.update(s, y):
            fresh = False
        x, fx, gx = x_new, f_new, g_new
        k += 1
        hist.append({"iter": k, "f": float(fx), "grad_inf_norm": _inf_norm(gx, _free_variables(x, gx, floors)),
                     "step_length": float(alpha), "status": "projected" if line.projected else "ok"})
        if callback is not None:
            callback(k, x, fx)
    hist[-1]["status"] = status if len(hist) > 1 or status != "max_iter" else hist[-1]["status"]
    return OptimResult(x, float(fx), gx, status, k, n_eval, hist, projections)
