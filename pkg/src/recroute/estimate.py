"""Maximum-likelihood estimators for incomplete trips.

``nfxp`` maximizes the likelihood of connected transitions (``complete``
mode requires every pair to be connected, ``ignore`` drops unconnected
ones); ``dc`` maximizes the exact likelihood including reach
probabilities of unconnected pairs; ``em`` runs expectation-maximization
over sampled connecting paths.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .em import EMConfig, em_estimate
from .likelihood import complete_log_likelihood, connected_weights, count_log_likelihood
from .model import DEFAULT_OPTIONS, ParamVector
from .optimize import maximize, standard_errors
from .reach import SolveCounter, dc_log_likelihood

ALGORITHMS = ("dc", "em", "nfxp-i", "nfxp-c")
RESULT_FIELDS = ("algorithm", "model", "theta_hat", "omega_hat", "mu", "feature_names",
                 "scale_names", "ll_at_solution", "iterations", "per_iteration_time",
                 "total_time", "converged", "diagnostics", "std_errors")


@dataclass
class EstimationResult:
    """Outcome of one estimation run.

    JSON layout (``to_json``): ``algorithm``, ``model``, ``theta_hat``
    (list), ``omega_hat`` (list, empty for RL), ``mu``, ``feature_names``,
    ``scale_names``, ``ll_at_solution`` (objective value at the estimate),
    ``iterations`` (outer iterations), ``per_iteration_time`` and
    ``total_time`` (seconds), ``converged``, ``diagnostics`` (dict),
    ``std_errors`` (list or null).
    """

    theta_hat: ParamVector
    ll_at_solution: float
    iterations: int
    per_iteration_time: float
    total_time: float
    algorithm: str
    converged: bool
    model: str = "rl"
    feature_names: tuple = ()
    scale_names: tuple = ()
    diagnostics: dict = field(default_factory=dict)
    std_errors: np.ndarray | None = None

    def to_dict(self):
        return {
            "algorithm": self.algorithm,
            "model": self.model,
            "theta_hat": self.theta_hat.theta.tolist(),
            "omega_hat": self.theta_hat.omega.tolist(),
            "mu": self.theta_hat.mu,
            "feature_names": list(self.feature_names),
            "scale_names": list(self.scale_names),
            "ll_at_solution": self.ll_at_solution,
            "iterations": self.iterations,
            "per_iteration_time": self.per_iteration_time,
            "total_time": self.total_time,
            "converged": self.converged,
            "diagnostics": self.diagnostics,
            "std_errors": None if self.std_errors is None else list(map(float, self.std_errors)),
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, d):
        missing = set(RESULT_FIELDS) - set(d)
        if missing:
            raise ValueError(f"estimation result lacks fields {sorted(missing)}")
        se = d["std_errors"]
        return cls(theta_hat=ParamVector(d["theta_hat"], d["omega_hat"], d["mu"]),
                   ll_at_solution=d["ll_at_solution"], iterations=d["iterations"],
                   per_iteration_time=d["per_iteration_time"], total_time=d["total_time"],
                   algorithm=d["algorithm"], converged=d["converged"], model=d["model"],
                   feature_names=tuple(d["feature_names"]),
                   scale_names=tuple(d["scale_names"]), diagnostics=d["diagnostics"],
                   std_errors=None if se is None else np.array(se, dtype=float))

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def default_start(net, model="rl", mu=1.0):
    """Zero utility and scale coefficients."""
    return ParamVector(np.zeros(net.n_features),
                       np.zeros(net.n_scale if model == "nrl" else 0), mu)


def _flat_objective(fn, template):
    def obj(x):
        return fn(ParamVector.from_flat(x, template.theta.size, template.mu))
    return obj


def _result(res, template, algorithm, model, net, total, iterations, diagnostics,
            obj=None, with_se=False):
    theta = ParamVector.from_flat(res.x, template.theta.size, template.mu)
    se = standard_errors(obj, res.x) if with_se and obj is not None else None
    diagnostics = {"status": res.status, "grad_inf_norm": float(np.max(np.abs(res.grad), initial=0.0)),
                   "objective_evaluations": res.n_evals, **diagnostics}
    return EstimationResult(theta, float(res.value), int(iterations),
                            total / max(iterations, 1), total, algorithm, bool(res.converged),
                            model, tuple(net.feature_names), tuple(net.scale_names),
                            diagnostics, se)


def nfxp_estimate(obs, model="rl", mode="complete", theta0=None, tol=1e-6, max_iter=500,
                  options=DEFAULT_OPTIONS, threads=1, with_se=False):
    """Nested fixed point estimation on connected transitions.

    ``mode="complete"`` raises :class:`ObservationError` on an unconnected
    pair; ``mode="ignore"`` silently drops them.
    """
    if mode not in ("complete", "ignore"):
        raise ValueError(f"unknown mode {mode!r}")
    theta0 = theta0 if theta0 is not None else default_start(obs.network, model)
    weights = connected_weights(obs, require_complete=(mode == "complete"))
    obj = _flat_objective(
        lambda p: count_log_likelihood(weights, p, model, options=options, threads=threads),
        theta0)
    t0 = time.perf_counter()
    res = maximize(obj, theta0.flat(), tol=tol, max_iter=max_iter)
    total = time.perf_counter() - t0
    algo = "nfxp-c" if mode == "complete" else "nfxp-i"
    return _result(res, theta0, algo, model, obs.network, total, res.iterations,
                   {"dropped_pairs": obs.n_unconnected() if mode == "ignore" else 0},
                   obj, with_se)


def dc_estimate(obs, model="rl", theta0=None, tol=1e-6, max_iter=500, options=DEFAULT_OPTIONS,
                threads=1, with_se=False):
    """Maximize the exact incomplete-trip likelihood.

    Every objective evaluation is audited: it must perform exactly
    ``(n_params + 1)`` composed solves per destination with unconnected
    pairs.
    """
    theta0 = theta0 if theta0 is not None else default_start(obs.network, model)
    counter = SolveCounter()
    n_dest = sum(1 for t in obs.tallies.values() if t.pairs)
    expected = (theta0.size if model == "nrl" else theta0.theta.size) + 1
    audit = {"evaluations": 0, "solves_per_evaluation": expected * n_dest}

    def fn(p):
        counter.reset()
        out = dc_log_likelihood(obs, p, model, options=options, counter=counter, threads=threads)
        if counter.composed != expected * n_dest:
            raise RuntimeError(f"composed solve count {counter.composed} != {expected * n_dest}")
        audit["evaluations"] += 1
        return out

    obj = _flat_objective(fn, theta0)
    t0 = time.perf_counter()
    res = maximize(obj, theta0.flat(), tol=tol, max_iter=max_iter)
    total = time.perf_counter() - t0
    return _result(res, theta0, "dc", model, obs.network, total, res.iterations,
                   {"destinations_with_pairs": n_dest, **audit}, obj, with_se)


def em_estimate_result(obs, model="rl", theta0=None, config=None, options=DEFAULT_OPTIONS,
                       marginal_ll=False, trace_path=None):
    """EM wrapped as an :class:`EstimationResult`.

    ``ll_at_solution`` is the expected log-likelihood of the final M-step;
    iterations count EM iterations (one E- and one M-step each).
    """
    config = config or EMConfig()
    theta0 = theta0 if theta0 is not None else default_start(obs.network, model)
    track = None
    if marginal_ll:
        def track(p):
            return dc_log_likelihood(obs, p, model, options=options, threads=config.threads)[0]
    theta, trace = em_estimate(obs, theta0, model, config, options, track, trace_path)
    last = trace.records[-1]
    diag = {"status": trace.status, "m_iterations": trace.m_iterations,
            "samples": config.samples, "xi": config.xi, "exact_e": config.exact,
            "final_step": last["step"],
            "e_time": sum(r["e_time"] for r in trace.records),
            "m_time": sum(r["m_time"] for r in trace.records),
            "walk_steps": sum(r["walk_steps"] for r in trace.records)}
    if marginal_ll:
        diag["marginal_ll"] = [r["marginal_ll"] for r in trace.records]
    return EstimationResult(theta, float(last["rhat"]), trace.iterations,
                            trace.elapsed / max(trace.iterations, 1), trace.elapsed, "em",
                            trace.converged, model, tuple(obs.network.feature_names),
                            tuple(obs.network.scale_names), diag)


def estimate(obs, algorithm, model="rl", theta0=None, tol=1e-6, max_iter=500,
             options=DEFAULT_OPTIONS, threads=1, em_config=None, with_se=False):
    """Dispatch on ``algorithm`` in ``ALGORITHMS``."""
    if algorithm == "dc":
        return dc_estimate(obs, model, theta0, tol, max_iter, options, threads, with_se)
    if algorithm == "nfxp-i":
        return nfxp_estimate(obs, model, "ignore", theta0, tol, max_iter, options, threads, with_se)
    if algorithm == "nfxp-c":
        return nfxp_estimate(obs, model, "complete", theta0, tol, max_iter, options, threads,
                             with_se)
    if algorithm == "em":
        cfg = em_config or EMConfig(gtol=tol, m_max_iter=max_iter, threads=threads)
        return em_estimate_result(obs, model, theta0, cfg, options)
    raise ValueError(f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}")


def evaluate_complete_ll(params, complete_obs, model="rl", options=DEFAULT_OPTIONS, threads=1):
    """Complete-path log-likelihood of fully connected trips at ``params``."""
    if isinstance(params, EstimationResult):
        params = params.theta_hat
    return complete_log_likelihood(complete_obs, params, model, options=options,
                                   threads=threads, jacobian=False)[0]
