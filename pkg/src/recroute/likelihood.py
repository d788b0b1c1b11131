"""Log-likelihood of observed transitions weighted by edge counts."""

from __future__ import annotations

import numpy as np

from .exceptions import InfeasibleParameters, ObservationError
from .model import DEFAULT_OPTIONS, solve_value
from .reach import PROB_FLOOR, map_destinations


def count_log_likelihood(weights, params, model="rl", *, options=DEFAULT_OPTIONS,
                         threads=1, jacobian=True):
    """``sum_dest sum_e w_e ln P_e`` and its gradient.

    Parameters
    ----------
    weights : dict
        Destination -> ``(ext, w)`` with ``w`` a weight per edge of ``ext``.
    """
    dests = list(weights)

    def one(d):
        ext, w = weights[d]
        vf = solve_value(ext, params, model, jacobian=jacobian, options=options)
        used = w > 0
        if np.any(vf.log_prob[used] < np.log(PROB_FLOOR)):
            raise InfeasibleParameters("observed transition has zero probability")
        ll = float(w[used] @ vf.log_prob[used])
        g = w @ vf.dlog_prob if jacobian else None
        return ll, g

    parts = map_destinations(one, dests, threads)
    ll = sum(p[0] for p in parts)
    if not jacobian:
        return ll, None
    grad = np.zeros(params.size if model == "nrl" else params.theta.size)
    for _, g in parts:
        grad += g
    return ll, grad


def connected_weights(obs, require_complete=False):
    """Edge counts of the connected pairs of ``obs``, per destination."""
    out = {}
    for d, tally in obs.tallies.items():
        if require_complete and tally.pairs:
            i, pos, u, v = tally.pairs[0]
            raise ObservationError(
                f"trip {obs.trips[i].id!r} has an unconnected pair at position {pos}")
        out[d] = (tally.ext, tally.counts)
    return out


def complete_log_likelihood(obs, params, model="rl", *, options=DEFAULT_OPTIONS,
                            threads=1, jacobian=True):
    """Standard path log-likelihood; every pair must be connected."""
    return count_log_likelihood(connected_weights(obs, require_complete=True), params, model,
                                options=options, threads=threads, jacobian=jacobian)


def connected_log_likelihood(obs, params, model="rl", *, options=DEFAULT_OPTIONS, threads=1):
    """Log-likelihood restricted to connected pairs (unconnected ones ignored)."""
    return count_log_likelihood(connected_weights(obs), params, model,
                                options=options, threads=threads)
