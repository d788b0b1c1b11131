import numpy as np
import pytest

from recroute.exceptions import EnumerationOverflow, InfeasibleParameters
from recroute.likelihood import complete_log_likelihood
from recroute.model import ParamVector, solve_value
from recroute.network import extend_for_destination
from recroute.observations import ObservationSet, Trip, corrupt_trips, simulate_observations
from recroute.reach import (PairQuery, SolveCounter, brute_force_reach, build_composed_system,
                            dc_log_likelihood, reach_jacobian, solve_reach_matrix,
                            solve_reach_single)

from conftest import (cyclic_grid, fd_gradient, make_diamond, random_dags, random_params,
                      rel_err)

D = 5


def random_queries(rng, ext, n=6):
    live = np.flatnonzero(ext.retained)
    out = []
    for _ in range(n):
        u = int(rng.choice(live[live != ext.dummy]))
        v = int(rng.choice(live))
        out.append(PairQuery(u, v, ext.dest))
    return out


class TestBruteForce:
    def test_diamond_examples(self, diamond_ext, beta):
        vf = solve_value(diamond_ext, beta)
        assert brute_force_reach(diamond_ext, vf, 0, 3) == pytest.approx(0.5, abs=1e-15)
        assert brute_force_reach(diamond_ext, vf, 2, 2) == 1.0
        assert brute_force_reach(diamond_ext, vf, 0, D) == pytest.approx(1.0, abs=1e-15)

    def test_overflow(self):
        net = cyclic_grid()
        ext = extend_for_destination(net, "n2_2")
        vf = solve_value(ext, ParamVector([-3.0, -1.0]))
        with pytest.raises(EnumerationOverflow):
            brute_force_reach(ext, vf, 0, ext.dummy, max_len=60, max_paths=1000)


class TestSingle:
    def test_absorption(self):
        for net, ext in random_dags(5, seed=21):
            vf = solve_value(ext, random_params(np.random.default_rng(0), net))
            pi = solve_reach_single(ext, vf, ext.dummy)
            np.testing.assert_allclose(pi[ext.retained], 1.0, atol=1e-12)

    def test_diamond(self, diamond_ext, beta):
        pi = solve_reach_single(diamond_ext, solve_value(diamond_ext, beta), 3)
        np.testing.assert_allclose(pi[[0, 1, 2, 3]], [0.5, 1.0, 0.0, 1.0], atol=1e-14)

    def test_asymmetric(self, beta):
        ext = extend_for_destination(make_diamond((1, 1, 2, 1, 1)), "t")
        pi = solve_reach_single(ext, solve_value(ext, beta), 3)
        assert pi[0] == pytest.approx(1 / (1 + np.exp(-1)), abs=1e-14)


class TestComposed:
    def test_single_query(self, diamond_ext, beta):
        vf = solve_value(diamond_ext, beta)
        system = build_composed_system(diamond_ext, vf, [PairQuery(0, 3, 4)])
        assert solve_reach_matrix(system).prob(0) == pytest.approx(0.5, abs=1e-14)

    def test_two_queries(self, diamond_ext, beta):
        vf = solve_value(diamond_ext, beta)
        system = build_composed_system(diamond_ext, vf, [PairQuery(0, 3, 4), PairQuery(1, D, 4)])
        counter = SolveCounter()
        reach = solve_reach_matrix(system, counter)
        np.testing.assert_allclose(reach.probs(), [0.5, 1.0], atol=1e-14)
        assert counter.composed == 1 and counter.factorizations == 1

    def test_structure(self, diamond_ext, beta):
        vf = solve_value(diamond_ext, beta)
        system = build_composed_system(diamond_ext, vf, [PairQuery(0, 3, 4), PairQuery(0, 3, 4)])
        Q0 = system.Q0.toarray()
        assert not Q0[-1].any() and not Q0[:, -1].any()
        assert np.all(Q0.sum(axis=0) <= 1 + 1e-12)
        np.testing.assert_array_equal(np.flatnonzero(system.H[:, 0]), [0, system.size - 1])
        reach = solve_reach_matrix(system)
        np.testing.assert_array_equal(reach.Pi[:, 0], reach.Pi[:, 1])
        resid = (np.eye(system.size) - Q0) @ reach.Pi - system.H
        assert np.abs(resid).max() <= 1e-12

    def test_zero_column(self, diamond_ext, beta):
        vf = solve_value(diamond_ext, beta)
        system = build_composed_system(diamond_ext, vf, [PairQuery(0, 3, 4)])
        system.H[:, 0] = 0.0
        np.testing.assert_array_equal(solve_reach_matrix(system).Pi, 0.0)

    def test_mixed_destinations(self, diamond_ext, beta):
        vf = solve_value(diamond_ext, beta)
        with pytest.raises(ValueError):
            build_composed_system(diamond_ext, vf, [PairQuery(0, 3, 3)])

    def test_oracles_on_random_dags(self):
        rng = np.random.default_rng(5)
        worst = 0.0
        for net, ext in random_dags(20, seed=5):
            vf = solve_value(ext, random_params(rng, net))
            qs = random_queries(rng, ext)
            reach = solve_reach_matrix(build_composed_system(ext, vf, qs))
            for j, q in enumerate(qs):
                if q.u == q.v:
                    continue
                bf = brute_force_reach(ext, vf, q.u, q.v)
                single = solve_reach_single(ext, vf, q.v)[q.u]
                worst = max(worst, abs(reach.prob(j) - bf), abs(single - bf))
        assert worst <= 1e-10

    def test_cyclic_discrepancy_is_visits(self):
        """On cyclic networks the composed solution counts visits, never less than the probability."""
        net = cyclic_grid()
        ext = extend_for_destination(net, "n2_2")
        vf = solve_value(ext, ParamVector([-1.0, -0.5]))
        rng = np.random.default_rng(1)
        qs = [q for q in random_queries(rng, ext, 10) if q.u != q.v and q.v != ext.dummy]
        reach = solve_reach_matrix(build_composed_system(ext, vf, qs))
        gaps = [reach.prob(j) - solve_reach_single(ext, vf, q.v)[q.u] for j, q in enumerate(qs)]
        assert min(gaps) >= -1e-12
        print(f"max composed - per-pair gap on a cyclic grid: {max(gaps):.3e}")


class TestReachJacobian:
    def test_diamond_fd(self):
        ext = extend_for_destination(make_diamond((1.0, 0.5, 1.5, 0.8, 0.2)), "t")
        qs = [PairQuery(0, 3, 4), PairQuery(1, D, 4)]

        def pi(b):
            vf = solve_value(ext, ParamVector(b))
            return solve_reach_matrix(build_composed_system(ext, vf, qs)).probs()

        vf = solve_value(ext, ParamVector([-0.7]))
        system = build_composed_system(ext, vf, qs)
        reach = solve_reach_matrix(system)
        J = reach_jacobian(system, reach)
        analytic = J[:, [3, D], [0, 1]].T
        assert rel_err(analytic, fd_gradient(pi, [-0.7])) <= 1e-5
        np.testing.assert_allclose(analytic[1], 0.0, atol=1e-14)

    def test_feature_free(self):
        ext = extend_for_destination(make_diamond((0, 0, 0, 0, 0)), "t")
        vf = solve_value(ext, ParamVector([-1.0]))
        system = build_composed_system(ext, vf, [PairQuery(0, 3, 4)])
        J = reach_jacobian(system, solve_reach_matrix(system))
        np.testing.assert_array_equal(J, 0.0)


class TestDCLikelihood:
    def test_diamond_single_trip(self, diamond, beta):
        obs = ObservationSet(diamond, [Trip("a", 4, (0, 3, D))])
        ll, _ = dc_log_likelihood(obs, beta)
        assert ll == pytest.approx(np.log(0.5), abs=1e-14)

    def test_complete_equals_path_ll(self):
        net, ext = random_dags(1, seed=8)[0]
        p = random_params(np.random.default_rng(8), net)
        obs = simulate_observations(net, p, n=30, dests=[ext.dest], seed=1, min_links=1)
        counter = SolveCounter()
        a = dc_log_likelihood(obs, p, counter=counter)
        b = complete_log_likelihood(obs, p)
        assert a[0] == pytest.approx(b[0], abs=1e-12)
        np.testing.assert_allclose(a[1], b[1], atol=1e-12)
        assert counter.composed == 0

    @pytest.mark.parametrize("model", ["rl", "nrl"])
    def test_gradient_fd(self, model):
        rng = np.random.default_rng(3)
        for net, ext in random_dags(4, seed=30):
            p = random_params(rng, net, model)
            obs = simulate_observations(net, p, n=20, dests=[ext.dest], seed=2, min_links=1)
            cobs, _ = corrupt_trips(obs, 0.6, seed=1)
            _, g = dc_log_likelihood(cobs, p, model)
            f = lambda x: dc_log_likelihood(cobs, ParamVector.from_flat(x, p.theta.size), model)[0]  # noqa: E731
            assert rel_err(g, fd_gradient(f, p.flat())) <= 1e-5

    def test_solve_count_independent_of_pairs(self):
        from recroute.network import generate_grid_network
        net = generate_grid_network(5, 4, diagonals=False, utility=["travel_time", "LT"])
        p = ParamVector([-1.5, -0.5])
        obs = simulate_observations(net, p, n=120, dests=["n4_3", "n3_3", "n4_2"], seed=4)
        counts = []
        for prob in (0.2, 0.5, 0.9):
            cobs, _ = corrupt_trips(obs, prob, seed=3)
            c = SolveCounter()
            dc_log_likelihood(cobs, p, counter=c)
            counts.append((cobs.n_unconnected(), c.composed, c.factorizations))
        assert len({n for n, _, _ in counts}) > 1
        assert all(comp == 3 * 3 and fac == 3 for _, comp, fac in counts)

    def test_zero_reach_probability_infeasible(self, diamond, beta):
        # link 2 never leads to link 3
        obs = ObservationSet(diamond, [Trip("a", 4, (2, 3, D))])
        with pytest.raises(InfeasibleParameters):
            dc_log_likelihood(obs, beta)

    def test_threads_bit_stable(self):
        from recroute.network import generate_grid_network
        net = generate_grid_network(5, 4, diagonals=False, utility=["travel_time", "LT"])
        p = ParamVector([-1.5, -0.5])
        obs = simulate_observations(net, p, n=90, dests=["n4_3", "n3_3", "n4_2"], seed=4)
        cobs, _ = corrupt_trips(obs, 0.5, seed=3)
        a = dc_log_likelihood(cobs, p, threads=1)
        b = dc_log_likelihood(cobs, p, threads=3)
        assert a[0] == b[0]
        np.testing.assert_array_equal(a[1], b[1])
