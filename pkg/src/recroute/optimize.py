"""Limited-memory BFGS ascent with a backtracking line search."""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InfeasibleParameters, ValueFunctionError

_FAILURES = (InfeasibleParameters, ValueFunctionError, FloatingPointError)


@dataclass
class OptimizeResult:
    x: np.ndarray
    value: float
    grad: np.ndarray
    iterations: int
    n_evals: int
    converged: bool
    status: str
    elapsed: float = 0.0
    history: list = field(default_factory=list)


def _safe_eval(obj, x):
    try:
        f, g = obj(x)
    except _FAILURES:
        return -np.inf, None
    f = float(f)
    if not np.isfinite(f):
        return -np.inf, None
    return f, np.asarray(g, dtype=float)


def _two_loop(g, S, Y):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append((rho, a))
        q -= a * y
    s, y = S[-1], Y[-1]
    q *= (s @ y) / (y @ y)
    for (s, y), (rho, a) in zip(zip(S, Y), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def maximize(obj, x0, tol=1e-6, max_iter=500, memory=10, c1=1e-4,
             max_backtrack=60, stall_iters=3):
    """Maximize ``obj`` (returning ``(value, gradient)``) by L-BFGS.

    Stops when ``max|grad| <= tol`` (status ``"gradient"``), when the
    objective stops improving for ``stall_iters`` consecutive iterations
    (``"stagnation"``), at ``max_iter`` (``"max_iter"``), or when no step
    along the search direction improves the objective
    (``"line_search_failure"``, returned with ``converged=False``).
    Points where ``obj`` raises :class:`InfeasibleParameters` or
    :class:`ValueFunctionError` count as ``-inf``; the line search only
    accepts finite, strictly non-decreasing values.
    """
    t0 = time.perf_counter()
    x = np.array(x0, dtype=float)
    f, g = _safe_eval(obj, x)
    n_evals = 1
    if g is None:
        raise InfeasibleParameters("objective is -inf at the starting point")
    # minimize F = -f internally
    F, G = -f, -g
    S, Y = deque(maxlen=memory), deque(maxlen=memory)
    history = [F]
    status, converged, it, stalled = "max_iter", False, 0, 0
    while it < max_iter:
        if np.max(np.abs(G), initial=0.0) <= tol:
            status, converged = "gradient", True
            break
        if S:
            d = -_two_loop(G, S, Y)
        else:
            d = -G / max(1.0, float(np.max(np.abs(G))))
        slope = G @ d
        if not slope < 0:
            S.clear()
            Y.clear()
            d = -G / max(1.0, float(np.max(np.abs(G))))
            slope = G @ d
        alpha = 1.0
        accepted = False
        for _ in range(max_backtrack):
            xn = x + alpha * d
            fn, gn = _safe_eval(obj, xn)
            n_evals += 1
            Fn = -fn
            if gn is not None and Fn <= F + c1 * alpha * slope:
                accepted = True
                break
            if gn is not None and np.isfinite(Fn):
                # safeguarded quadratic interpolation
                denom = 2.0 * (Fn - F - alpha * slope)
                a_new = -slope * alpha**2 / denom if denom > 0 else 0.5 * alpha
                alpha = float(np.clip(a_new, 0.1 * alpha, 0.5 * alpha))
            else:
                alpha *= 0.25
        if not accepted:
            status = "line_search_failure"
            break
        gn_neg = -gn
        s, y = xn - x, gn_neg - G
        if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            S.append(s)
            Y.append(y)
        it += 1
        improvement = F - Fn
        x, F, G = xn, Fn, gn_neg
        history.append(F)
        if improvement <= 1e-15 * max(1.0, abs(F)):
            stalled += 1
            if stalled >= stall_iters:
                status, converged = "stagnation", True
                break
        else:
            stalled = 0
    return OptimizeResult(x=x, value=-F, grad=-G, iterations=it, n_evals=n_evals,
                          converged=converged, status=status,
                          elapsed=time.perf_counter() - t0,
                          history=[-h for h in history])


def numeric_hessian(grad_fn, x, h=1e-5):
    """Symmetrized central-difference Hessian from an analytic gradient."""
    x = np.asarray(x, dtype=float)
    n = x.size
    H = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        H[:, j] = (grad_fn(x + e) - grad_fn(x - e)) / (2 * h)
    return 0.5 * (H + H.T)


def standard_errors(obj, x, h=1e-5):
    """Asymptotic standard errors from the inverse of the negated numeric Hessian."""
    H = numeric_hessian(lambda z: obj(z)[1], x, h)
    try:
        cov = np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        return np.full(x.size, np.nan)
    return np.sqrt(np.where(np.diag(cov) > 0, np.diag(cov), np.nan))
