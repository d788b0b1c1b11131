"""Recursive logit (RL) and nested recursive logit (NRL) link choice models.

For one destination, with ``Z_k = exp(V(k) / mu_k)``:

* RL:  ``Z = M Z + b`` where ``M_ka = exp(v(a|k) / mu)``, a linear system.
* NRL: ``Z_k = sum_a M_ka Z_a ** phi_ka + b_k`` with ``M_ka = exp(v(a|k) / mu_k)``,
  ``phi_ka = mu_a / mu_k`` and ``mu_k = exp(omega . s_k)``, ``mu_d = 1``.

``b`` is zero except ``b_d = 1``, so ``Z_d = 1`` and ``V(d) = 0``.  Link
choice probabilities are ``P(a|k) = M_ka Z_a ** phi_ka / Z_k``.

Utilities are linear, ``v(a|k) = theta . x(a|k)``; the dummy transition has
``v(d|k) = 0``.  Parameter points giving any positive real-link utility are
rejected (:class:`InfeasibleParameters`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .exceptions import InfeasibleParameters, ValueFunctionError

POSITIVITY_FLOOR = 1e-300
MODELS = ("rl", "nrl")


@dataclass(frozen=True)
class ParamVector:
    """Utility coefficients ``theta``; NRL scale coefficients ``omega``; RL scale ``mu``."""

    theta: np.ndarray
    omega: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mu: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "theta", np.atleast_1d(np.asarray(self.theta, dtype=float)))
        object.__setattr__(self, "omega", np.atleast_1d(np.asarray(self.omega, dtype=float)))
        if not self.mu > 0:
            raise ValueError("mu must be positive")

    @property
    def size(self):
        return self.theta.size + self.omega.size

    def flat(self):
        return np.concatenate([self.theta, self.omega])

    @classmethod
    def from_flat(cls, x, n_theta, mu=1.0):
        x = np.asarray(x, dtype=float)
        return cls(theta=x[:n_theta], omega=x[n_theta:], mu=mu)


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-10
    max_iter: int = 5000
    damping: float = 1.0
    newton_polish: bool = True
    floor: float = POSITIVITY_FLOOR


DEFAULT_OPTIONS = SolverOptions()


@dataclass(eq=False)
class ValueField:
    """Solved value function of one destination, with link probabilities.

    ``log_prob`` and ``prob`` are indexed like ``ext.edge_*``.  When the
    Jacobian has been computed, ``dZ`` is (n_states, n_params) and
    ``dlog_prob`` is (n_edges, n_params); parameters are ordered
    ``theta`` then ``omega``.
    """

    ext: object
    params: ParamVector
    model: str
    utility: np.ndarray
    mu_link: np.ndarray
    M: np.ndarray
    Z: np.ndarray
    log_prob: np.ndarray
    lu: object = None
    dZ: np.ndarray | None = None
    dlog_prob: np.ndarray | None = None
    iterations: int = 0
    residual: float = 0.0
    history: list = field(default_factory=list)

    @property
    def dest(self):
        return self.ext.dest

    @property
    def prob(self):
        return np.exp(self.log_prob)

    @property
    def logZ(self):
        out = np.full(self.Z.shape, -np.inf)
        pos = self.Z > 0
        out[pos] = np.log(self.Z[pos])
        return out

    @property
    def V(self):
        """Value function ``V(k) = mu_k ln Z_k`` (``-inf`` on pruned links)."""
        return self.mu_link * self.logZ

    @property
    def phi(self):
        ext = self.ext
        return self.mu_link[ext.edge_dst] / self.mu_link[ext.edge_src]

    @property
    def dprob(self):
        return self.prob[:, None] * self.dlog_prob


def _utilities(ext, params):
    if params.theta.size != ext.features.shape[1]:
        raise ValueError(
            f"theta has {params.theta.size} entries, network has {ext.features.shape[1]} features")
    v = ext.features @ params.theta
    real = ~ext.is_dummy_edge
    if np.any(v[real] > 0):
        raise InfeasibleParameters("positive link utility at this parameter point")
    v[~real] = 0.0
    return v


def _link_scales(ext, params, model):
    if model == "rl":
        return np.full(ext.n_states, float(params.mu))
    if params.omega.size != ext.scale.shape[1]:
        raise ValueError(
            f"omega has {params.omega.size} entries, network has {ext.scale.shape[1]} scale attributes")
    mu = np.exp(ext.scale @ params.omega)
    mu[ext.dummy] = 1.0
    return mu


def build_transition_weights(ext, params, model="rl"):
    """Sparse ``M`` with ``M_ka = exp(v(a|k) / mu_k)`` on the transitions of ``ext``."""
    v = _utilities(ext, params)
    mu = _link_scales(ext, params, model)
    w = np.exp(v / mu[ext.edge_src])
    return sp.csr_matrix((w, (ext.edge_src, ext.edge_dst)), shape=(ext.n_states, ext.n_states))


def _system_matrix(ext, values):
    """Sparse ``I - A`` with ``A`` carrying ``values`` on the transitions of ``ext``."""
    n = ext.n_states
    A = sp.csr_matrix((values, (ext.edge_src, ext.edge_dst)), shape=(n, n))
    return (sp.identity(n, format="csc") - A).tocsc()


def _factorize(A):
    try:
        return splu(A)
    except RuntimeError as exc:
        raise ValueFunctionError(f"value system is singular ({exc})") from None


def _check_positive(ext, Z, floor):
    z = Z[ext.retained]
    if not np.all(np.isfinite(z)) or np.any(z <= floor):
        raise ValueFunctionError(
            "value function is not positive on every retained link; "
            "path utilities are too large for the network (spectral radius >= 1)")


def solve_value_rl(ext, params, options=DEFAULT_OPTIONS):
    """Solve ``Z = M Z + b`` by sparse LU; the factorization is kept for the Jacobian."""
    v = _utilities(ext, params)
    mu = _link_scales(ext, params, "rl")
    M = np.exp(v / mu[ext.edge_src])
    lu = _factorize(_system_matrix(ext, M))
    b = np.zeros(ext.n_states)
    b[ext.dummy] = 1.0
    Z = lu.solve(b)
    _check_positive(ext, Z, options.floor)
    MZ = ext.src_incidence @ (M * Z[ext.edge_dst])
    resid = float(np.max(np.abs(Z - MZ - b)))
    if resid > max(options.tol, 1e-10 * float(np.max(np.abs(Z)))):
        raise ValueFunctionError(f"value system residual {resid:.3g} exceeds tolerance")
    return _finish(ext, params, "rl", v, mu, M, Z, lu=lu, residual=resid)


def _nrl_operator(ext, M, phi, Z):
    return ext.src_incidence @ (M * Z[ext.edge_dst] ** phi)


def _nrl_jacobian_matrix(ext, M, phi, Z):
    """``I - dF/dZ`` for the NRL fixed point operator."""
    zd = Z[ext.edge_dst]
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = M * phi * np.where(zd > 0, zd ** (phi - 1.0), 0.0)
    return _system_matrix(ext, vals)


def solve_value_nrl(ext, params, options=DEFAULT_OPTIONS, trace=False):
    """Damped value iteration on the NRL fixed point, started from ``Z = b``.

    ``Z <- (1 - alpha) Z + alpha F(Z)`` until the sup-norm change is below
    ``options.tol``; then (``newton_polish``) up to three Newton steps on
    ``Z - F(Z) = 0`` sharpen the solution to machine precision.
    """
    v = _utilities(ext, params)
    mu = _link_scales(ext, params, "nrl")
    M = np.exp(v / mu[ext.edge_src])
    phi = mu[ext.edge_dst] / mu[ext.edge_src]
    b = np.zeros(ext.n_states)
    b[ext.dummy] = 1.0
    alpha = options.damping
    Z = b.copy()
    history = []
    it = 0
    while True:
        if it >= options.max_iter:
            raise ValueFunctionError(f"NRL value iteration did not converge in {options.max_iter} iterations")
        Fz = _nrl_operator(ext, M, phi, Z) + b
        new = (1.0 - alpha) * Z + alpha * Fz
        it += 1
        if not np.all(np.isfinite(new)) or new.max() > 1e300:
            raise ValueFunctionError("NRL value iteration diverged")
        step = float(np.max(np.abs(new - Z)))
        if trace:
            history.append(new.copy())
        Z = new
        if step <= options.tol:
            break
    _check_positive(ext, Z, options.floor)
    lu = None
    if options.newton_polish:
        for _ in range(3):
            r = Z - _nrl_operator(ext, M, phi, Z) - b
            if float(np.max(np.abs(r))) <= 1e-15 * max(1.0, float(Z.max())):
                break
            lu = _factorize(_nrl_jacobian_matrix(ext, M, phi, Z))
            Z = Z - lu.solve(r)
        _check_positive(ext, Z, options.floor)
    resid = float(np.max(np.abs(Z - _nrl_operator(ext, M, phi, Z) - b)))
    if resid > max(options.tol, 1e-10 * float(Z.max())):
        raise ValueFunctionError(f"NRL residual {resid:.3g} exceeds tolerance")
    vf = _finish(ext, params, "nrl", v, mu, M, Z, lu=lu, residual=resid)
    vf.iterations = it
    vf.history = history
    return vf


def _finish(ext, params, model, v, mu, M, Z, lu=None, residual=0.0):
    src, dst = ext.edge_src, ext.edge_dst
    lz = np.zeros_like(Z)
    pos = Z > 0
    lz[pos] = np.log(Z[pos])
    phi = mu[dst] / mu[src]
    log_prob = v / mu[src] + phi * lz[dst] - lz[src]
    return ValueField(ext=ext, params=params, model=model, utility=v, mu_link=mu,
                      M=M, Z=Z, log_prob=log_prob, lu=lu, residual=residual)


def value_jacobian(vf):
    """Fill ``vf.dZ``, the derivatives of ``Z`` w.r.t. ``theta`` (then ``omega``).

    RL: ``(I - M) dZ/dtheta_i = (dM/dtheta_i) Z``, reusing the LU of ``I - M``.
    NRL: implicit differentiation of ``Z = F(Z)``,
    ``(I - dF/dZ) dZ/dp = dF/dp``.
    """
    if vf.dZ is not None:
        return vf.dZ
    ext, params = vf.ext, vf.params
    src, dst = ext.edge_src, ext.edge_dst
    X = ext.features
    mu = vf.mu_link
    Z = vf.Z
    if vf.model == "rl":
        if vf.lu is None:
            vf.lu = _factorize(_system_matrix(ext, vf.M))
        w = vf.M * Z[dst] / mu[src]
        rhs = ext.src_incidence @ (w[:, None] * X)
        dZ = vf.lu.solve(np.asarray(rhs)) if rhs.shape[1] else np.zeros((ext.n_states, 0))
    else:
        phi = vf.phi
        T = vf.M * Z[dst] ** phi
        lz_dst = np.log(np.where(Z[dst] > 0, Z[dst], 1.0))
        S = ext.scale
        d_theta = (T / mu[src])[:, None] * X
        d_omega = T[:, None] * (-(vf.utility / mu[src])[:, None] * S[src]
                                + (phi * lz_dst)[:, None] * (S[dst] - S[src]))
        rhs = np.asarray(ext.src_incidence @ np.hstack([d_theta, d_omega]))
        if vf.lu is None:
            vf.lu = _factorize(_nrl_jacobian_matrix(ext, vf.M, phi, Z))
        dZ = vf.lu.solve(rhs) if rhs.shape[1] else np.zeros((ext.n_states, 0))
    dZ = np.atleast_2d(dZ.reshape(ext.n_states, -1))
    dZ[~ext.retained] = 0.0
    dZ[ext.dummy] = 0.0
    vf.dZ = dZ
    vf.dlog_prob = _dlog_prob(vf)
    return dZ


def _dlog_prob(vf):
    """Derivatives of ``ln P(a|k)`` on every transition.

    ``d ln P = (dv + dV(a) - dV(k)) / mu_k - (dmu_k / mu_k^2)(v + V(a) - V(k))``
    with ``V = mu ln Z``; the second term vanishes for RL.
    """
    ext, params = vf.ext, vf.params
    src, dst = ext.edge_src, ext.edge_dst
    mu = vf.mu_link
    n_theta = params.theta.size
    K = n_theta + (params.omega.size if vf.model == "nrl" else 0)
    lz = np.zeros(ext.n_states)
    pos = vf.Z > 0
    lz[pos] = np.log(vf.Z[pos])
    dmu = np.zeros((ext.n_states, K))
    if vf.model == "nrl":
        dmu[:, n_theta:] = mu[:, None] * ext.scale
        dmu[ext.dummy] = 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        dlz = np.where(pos[:, None], vf.dZ / np.where(pos, vf.Z, 1.0)[:, None], 0.0)
    dV = dmu * lz[:, None] + mu[:, None] * dlz
    V = mu * lz
    dv = np.zeros((ext.n_edges, K))
    dv[:, :n_theta] = ext.features
    gap = vf.utility + V[dst] - V[src]
    return ((dv + dV[dst] - dV[src]) / mu[src][:, None]
            - (dmu[src] / (mu[src] ** 2)[:, None]) * gap[:, None])


def solve_value(ext, params, model="rl", jacobian=True, options=DEFAULT_OPTIONS):
    """Value function, link probabilities and (optionally) their derivatives."""
    if model not in MODELS:
        raise ValueError(f"unknown model {model!r}")
    vf = solve_value_rl(ext, params, options) if model == "rl" else solve_value_nrl(ext, params, options)
    if jacobian:
        value_jacobian(vf)
    return vf


def _edge(vf, k, a):
    ext = vf.ext
    if not ext.retained[k] or k == ext.dummy:
        raise ValueError(f"link {k} is pruned or absorbing for destination {ext.dest}")
    e = ext.edge_index(k, a)
    if e is None:
        raise ValueError(f"link {a} is not an outgoing link of {k}")
    return e


def link_choice_prob(vf, k, a):
    """``P(a|k)`` for ``a`` in ``A(k)``."""
    return float(np.exp(vf.log_prob[_edge(vf, k, a)]))


def link_prob_gradient(vf, k, a):
    """Gradient of ``P(a|k)`` w.r.t. ``theta`` (then ``omega`` for NRL)."""
    e = _edge(vf, k, a)
    if vf.dlog_prob is None:
        value_jacobian(vf)
    return np.exp(vf.log_prob[e]) * vf.dlog_prob[e]


def outgoing_prob_sums(vf):
    """``sum_a P(a|k)`` per state (zero for pruned links and the dummy)."""
    return np.asarray(vf.ext.src_incidence @ vf.prob).ravel()


def n_params(net, model):
    return net.n_features + (net.n_scale if model == "nrl" else 0)
