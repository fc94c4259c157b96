"""Full-batch limited-memory BFGS with a strong-Wolfe line search."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class LbfgsConfig:
    max_iter: int = 1000
    history_size: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    gtol: float = 1e-9
    max_ls_evals: int = 25


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    g: np.ndarray
    iterations: int
    evaluations: int
    status: str
    history: list = field(default_factory=list)


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic interpolant through (a, fa, ga), (b, fb, gb), or None."""
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(disc)
    denom = gb - ga + 2.0 * d2
    if denom == 0:
        return None
    return b - (b - a) * (gb + d2 - d1) / denom


def _sufficient_decrease(fa, f0, a, g0, c1):
    # demanded decrease below float resolution: settle for no increase
    target = f0 + c1 * a * g0
    if f0 - target <= 4 * np.finfo(float).eps * abs(f0):
        return fa <= f0
    return fa <= target


def strong_wolfe(phi, f0, g0, alpha0, c1, c2, max_evals, alpha_max=1e10):
    """Line search of Nocedal and Wright (Alg. 3.5 with the zoom of Alg. 3.6).

    ``phi(alpha)`` returns ``(f, dphi, payload)``. Returns ``(alpha, f, dphi,
    payload, n_evals)`` with ``alpha is None`` on failure; the returned point is
    always the last one evaluated.
    """
    evals = 0
    a_prev, f_prev, g_prev = 0.0, f0, g0
    a = alpha0
    best = None
    while evals < max_evals:
        fa, ga, pay = phi(a)
        evals += 1
        if not np.isfinite(fa):
            # overshoot into a nonfinite region: treat as a failed sufficient-decrease
            return _zoom(phi, f0, g0, a_prev, f_prev, g_prev, a, np.inf, np.nan, c1, c2, max_evals - evals, evals, best)
        if not _sufficient_decrease(fa, f0, a, g0, c1) or (evals > 1 and fa >= f_prev):
            return _zoom(phi, f0, g0, a_prev, f_prev, g_prev, a, fa, ga, c1, c2, max_evals - evals, evals, best)
        if abs(ga) <= -c2 * g0:
            return a, fa, ga, pay, evals
        best = (a, fa, ga, pay)
        if ga >= 0:
            return _zoom(phi, f0, g0, a, fa, ga, a_prev, f_prev, g_prev, c1, c2, max_evals - evals, evals, best)
        a_prev, f_prev, g_prev = a, fa, ga
        a = min(2.0 * a, alpha_max)
    return None, None, None, None, evals


def _zoom(phi, f0, g0, lo, flo, glo, hi, fhi, ghi, c1, c2, budget, evals, best):
    for _ in range(max(budget, 0)):
        a = None
        if np.isfinite(fhi) and np.isfinite(ghi):
            a = _cubic_min(lo, flo, glo, hi, fhi, ghi)
        left, right = min(lo, hi), max(lo, hi)
        margin = 0.1 * (right - left)
        if a is None or not (left + margin <= a <= right - margin):
            a = 0.5 * (lo + hi)
        fa, ga, pay = phi(a)
        evals += 1
        if not np.isfinite(fa) or not _sufficient_decrease(fa, f0, a, g0, c1) or fa >= flo:
            hi, fhi, ghi = a, fa, ga
        else:
            if abs(ga) <= -c2 * g0:
                return a, fa, ga, pay, evals
            if ga * (hi - lo) >= 0:
                hi, fhi, ghi = lo, flo, glo
            lo, flo, glo = a, fa, ga
            best = (a, fa, ga, pay)
        if abs(hi - lo) <= 1e-16 * max(1.0, abs(lo)):
            break
    return None, None, None, None, evals


def lbfgs_minimize(
    fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0,
    config: LbfgsConfig = LbfgsConfig(),
    callback: Callable[[int, np.ndarray, float, np.ndarray], None] | None = None,
) -> LbfgsResult:
    """Minimize ``fun`` (returning value and gradient) from ``x0``.

    Stops when the iteration budget is spent, the gradient max-norm drops below
    ``gtol``, or the line search fails; on failure the best point so far is
    returned with ``status == "line_search_failed"``. ``callback`` sees every
    accepted iterate. ``history`` holds the objective after each accepted step.
    """
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    evals = 1
    f = float(f)
    if not np.isfinite(f):
        raise FloatingPointError("objective is nonfinite at the starting point")
    S, Y, rho = deque(maxlen=config.history_size), deque(maxlen=config.history_size), deque(maxlen=config.history_size)
    history = []
    status = "max_iter"
    it = 0
    while it < config.max_iter:
        if np.max(np.abs(g)) < config.gtol:
            status = "converged"
            break
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, r in zip(reversed(S), reversed(Y), reversed(rho)):
            a = r * (s @ q)
            alphas.append(a)
            q -= a * y
        if S:
            gamma = (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
            q *= gamma
        for (s, y, r), a in zip(zip(S, Y, rho), reversed(alphas)):
            b = r * (y @ q)
            q += (a - b) * s
        d = -q
        gd = g @ d
        if not gd < 0:
            S.clear(), Y.clear(), rho.clear()
            d = -g
            gd = g @ d
        alpha0 = 1.0 if S else min(1.0, 1.0 / max(np.sum(np.abs(g)), 1e-300))

        def phi(a, x=x, d=d):
            xa = x + a * d
            fa, ga = fun(xa)
            return float(fa), float(ga @ d), (xa, ga)

        a, fa, dphi, pay, n = strong_wolfe(phi, f, gd, alpha0, config.c1, config.c2, config.max_ls_evals)
        evals += n
        if a is None:
            status = "line_search_failed"
            break
        x_new, g_new = pay
        s, y = x_new - x, g_new - g
        sy = s @ y
        if sy > 1e-12 * np.sqrt((s @ s) * (y @ y)):
            S.append(s), Y.append(y), rho.append(1.0 / sy)
        x, f, g = x_new, fa, g_new
        it += 1
        history.append(f)
        if callback is not None:
            callback(it, x, f, g)
    return LbfgsResult(x=x, f=f, g=g, iterations=it, evaluations=evals, status=status, history=history)
