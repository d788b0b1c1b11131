import numpy as np
import pytest

from recroute.model import ParamVector
from recroute.network import build_network, extend_for_destination, random_acyclic_network


def make_diamond(tt=(1.0, 1.0, 1.0, 1.0, 1.0), scale=None):
    """Links 0: s->o, 1: o->m1, 2: o->m2, 3: m1->t, 4: m2->t (destination t).

    With ``theta = [-1]`` each real transition has utility ``-tt`` of the
    entered link.  ``scale`` is an optional per-link attribute ``s0``.
    """
    attrs = {"travel_time": list(tt)}
    if scale is not None:
        attrs["s0"] = list(scale)
    return build_network(["0", "1", "2", "3", "4"], ["s", "o", "o", "m1", "m2"],
                         ["o", "m1", "m2", "t", "t"], attrs,
                         node_ids=["s", "o", "m1", "m2", "t"], utility=["travel_time"],
                         scale=["s0"] if scale is not None else ["travel_time"])


@pytest.fixture
def diamond():
    return make_diamond()


@pytest.fixture
def diamond_ext(diamond):
    return extend_for_destination(diamond, "t")


@pytest.fixture
def beta():
    return ParamVector([-1.0])


def random_dags(n=20, seed=0, **kw):
    """``n`` random acyclic networks (at most 12 links) with their extended forms."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        net, dest = random_acyclic_network(rng, n_nodes=int(rng.integers(4, 8)), max_links=12, **kw)
        out.append((net, extend_for_destination(net, dest)))
    return out


def random_params(rng, net, model="rl", low=0.2, high=2.0):
    """Strictly negative utility coefficients and moderate scale coefficients."""
    theta = -rng.uniform(low, high, net.n_features)
    omega = rng.uniform(-0.5, 0.5, net.n_scale) if model == "nrl" else []
    return ParamVector(theta, omega)


def cyclic_grid():
    """Small grid with links in both directions (cyclic)."""
    from recroute.network import generate_grid_network
    return generate_grid_network(3, 3, diagonals=False, bidirectional=True, seed=4,
                                 utility=["travel_time", "LT"])


def fd_gradient(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g.append((f(x + e) - f(x - e)) / (2 * h))
    return np.array(g).T


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))
