import numpy as np
import pytest

from recroute.em import (EMConfig, _walk_batch, build_expected_ll, e_step, em_estimate,
                         exact_connecting_paths, sample_connecting_paths)
from recroute.estimate import nfxp_estimate
from recroute.exceptions import UnsampleablePair
from recroute.likelihood import complete_log_likelihood
from recroute.model import ParamVector, solve_value
from recroute.network import extend_for_destination, generate_grid_network
from recroute.observations import (ObservationSet, TransitionSampler, Trip, corrupt_trips,
                                   simulate_observations)
from recroute.optimize import numeric_hessian
from recroute.reach import PairQuery, dc_log_likelihood

from conftest import fd_gradient, make_diamond, random_dags, random_params, rel_err

D = 5


@pytest.fixture(scope="module")
def grid_data():
    net = generate_grid_network(5, 4, diagonals=False, utility=["travel_time", "LT"])
    truth = ParamVector([-1.5, -0.5])
    obs = simulate_observations(net, truth, n=150, dests=["n4_3", "n3_3"], seed=6)
    cobs, _ = corrupt_trips(obs, 0.5, seed=2)
    return obs, cobs, truth


class TestSampling:
    def test_pair_to_destination(self, beta):
        ext = extend_for_destination(make_diamond((1, 1, 1.5, 1, 1)), "t")
        vf = solve_value(ext, beta)
        samples = sample_connecting_paths(ext, vf, PairQuery(0, D, 4), S=5,
                                          rng=np.random.default_rng(0))
        assert len(samples) == 5 and not any(s.is_dummy for s in samples)
        assert sum(s.weight for s in samples) == pytest.approx(1.0, abs=1e-15)
        for s in samples:
            assert s.links[0] == 0 and s.links[-1] == D
            assert s.weight == pytest.approx(s.prob / sum(t.prob for t in samples))
        assert {s.links for s in samples} <= {(0, 1, 3, D), (0, 2, 4, D)}

    def test_acceptance_rate(self, diamond_ext, beta):
        vf = solve_value(diamond_ext, beta)
        n = 10_000
        paths, _ = _walk_batch(diamond_ext, TransitionSampler(vf), vf.log_prob,
                               np.zeros(n, dtype=np.int64), np.full(n, 3), 12,
                               np.random.default_rng(1))
        accepted = [p for p in paths if p is not None]
        assert abs(len(accepted) / n - 0.5) <= 0.015
        links = {tuple(diamond_ext.edge_dst[p]) for p in accepted}
        assert links == {(1, 3)}

    def test_unreachable(self, diamond_ext, beta):
        vf = solve_value(diamond_ext, beta)
        with pytest.raises(UnsampleablePair):
            sample_connecting_paths(diamond_ext, vf, PairQuery(2, 3, 4), S=3, retry_cap=5,
                                    rng=np.random.default_rng(0))

    def test_weights_sum_to_one(self, grid_data):
        _, cobs, truth = grid_data
        samples, stats = e_step(cobs, truth, config=EMConfig(seed=3))
        by_pair = {}
        for group in samples.values():
            for s in group:
                by_pair.setdefault((s.trip, s.position), []).append(s)
        assert len(by_pair) == cobs.n_unconnected()
        for group in by_pair.values():
            assert len(group) == 5
            assert sum(s.weight for s in group) == pytest.approx(1.0, abs=1e-12)
            assert all(s.weight == 0 for s in group if s.is_dummy)
            for s in group:
                if not s.is_dummy:
                    assert s.links[0] == s.pair.u and s.links[-1] == s.pair.v

    def test_common_random_numbers(self, grid_data):
        _, cobs, truth = grid_data
        a, _ = e_step(cobs, truth, config=EMConfig(seed=3), iteration=0)
        b, _ = e_step(cobs, truth, config=EMConfig(seed=3), iteration=5)
        assert a == b
        c, _ = e_step(cobs, truth, config=EMConfig(seed=3, fresh_streams=True), iteration=5)
        assert a != c


class TestExpectedLL:
    def test_complete_data_identity(self, grid_data):
        obs, _, truth = grid_data
        rhat = build_expected_ll(obs, {}, truth)
        for x in ([-1.0, -0.2], [-2.0, -1.0]):
            a, b = rhat(x), complete_log_likelihood(obs, ParamVector(x))
            assert a[0] == pytest.approx(b[0], abs=1e-10)
            np.testing.assert_allclose(a[1], b[1], atol=1e-10)

    def test_exact_e_gap_is_entropy(self, beta):
        """ll(theta_t) = R(theta_t | theta_t) + sum of conditional path entropies."""
        net = make_diamond((1, 1, 1.5, 1, 1))
        obs = ObservationSet(net, [Trip("a", 4, (0, D)), Trip("b", 4, (0, 1, D))])
        samples, _ = e_step(obs, beta, config=EMConfig(exact=True))
        rhat = build_expected_ll(obs, samples, beta)
        ll = dc_log_likelihood(obs, beta)[0]
        w = np.array([s.weight for s in samples[4]])
        entropy = -np.sum(w * np.log(w))
        assert ll >= rhat(beta.flat())[0]
        assert ll == pytest.approx(rhat(beta.flat())[0] + entropy, abs=1e-12)

    def test_dummies_contribute_nothing(self, grid_data):
        _, cobs, truth = grid_data
        samples, _ = e_step(cobs, truth, config=EMConfig(seed=1))
        filler = next(s for g in samples.values() for s in g if not s.is_dummy)
        import dataclasses
        dummy = dataclasses.replace(filler, weight=0.0, is_dummy=True)
        padded = {d: list(g) + ([dummy] if d == filler.pair.dest else []) for d, g in samples.items()}
        x = np.array([-1.2, -0.7])
        a = build_expected_ll(cobs, samples, truth)
        b = build_expected_ll(cobs, padded, truth)
        assert a(x)[0] == b(x)[0]
        np.testing.assert_array_equal(a(x)[1], b(x)[1])

    def test_bookkeeping_and_gradient(self, grid_data):
        _, cobs, truth = grid_data
        samples, _ = e_step(cobs, truth, config=EMConfig(seed=2))
        rhat = build_expected_ll(cobs, samples, truth)
        x = truth.flat()
        v, g = rhat(x)
        v2, g2 = rhat.term_by_term(x)
        assert v == pytest.approx(v2, rel=1e-12)
        np.testing.assert_allclose(g, g2, rtol=1e-10)
        assert rel_err(g, fd_gradient(lambda z: rhat(z)[0], x)) <= 1e-5

    def test_concave_in_theta(self, grid_data):
        _, cobs, truth = grid_data
        samples, _ = e_step(cobs, truth, config=EMConfig(seed=2))
        rhat = build_expected_ll(cobs, samples, truth)
        rng = np.random.default_rng(0)
        for _ in range(20):
            a, b = -rng.uniform(0.1, 3.0, 2), -rng.uniform(0.1, 3.0, 2)
            assert rhat((a + b) / 2)[0] >= (rhat(a)[0] + rhat(b)[0]) / 2 - 1e-8
        H = numeric_hessian(lambda z: rhat(z)[1], truth.flat())
        assert np.linalg.eigvalsh(H).max() <= 1e-8


class TestEM:
    def test_complete_data_single_m_step(self, grid_data):
        obs, _, _ = grid_data
        theta, trace = em_estimate(obs, ParamVector([0.0, 0.0]))
        ref = nfxp_estimate(obs)
        assert trace.iterations == 1 and trace.converged
        np.testing.assert_allclose(theta.theta, ref.theta_hat.theta, atol=1e-5)

    def test_exact_e_monotone(self):
        rng = np.random.default_rng(4)
        for net, ext in random_dags(3, seed=40):
            p = random_params(rng, net)
            obs = simulate_observations(net, p, n=40, dests=[ext.dest], seed=3, min_links=2)
            cobs, _ = corrupt_trips(obs, 0.7, seed=5)
            if cobs.is_complete():
                continue
            track = lambda q: dc_log_likelihood(cobs, q)[0]  # noqa: E731
            theta, trace = em_estimate(cobs, ParamVector(np.zeros(net.n_features)),
                                       config=EMConfig(exact=True, max_iter=15), marginal_ll=track)
            lls = [track(ParamVector(np.zeros(net.n_features)))] + [
                r["marginal_ll"] for r in trace.records]
            assert np.all(np.diff(lls) >= -1e-10)

    def test_trace_jsonl(self, grid_data, tmp_path):
        _, cobs, _ = grid_data
        path = tmp_path / "trace.jsonl"
        _, trace = em_estimate(cobs, ParamVector([0.0, 0.0]), config=EMConfig(max_iter=3),
                               trace_path=path)
        lines = path.read_text().splitlines()
        assert len(lines) == trace.iterations
        import json
        rec = json.loads(lines[0])
        assert {"theta", "step", "rhat", "e_time", "m_time"} <= set(rec)

    def test_exact_paths_weights(self):
        vf = solve_value(extend_for_destination(make_diamond((1, 1, 2, 1, 1)), "t"),
                         ParamVector([-1.0]))
        s = exact_connecting_paths(vf.ext, vf, PairQuery(0, D, 4))
        assert [x.links for x in s] == [(0, 1, 3, D), (0, 2, 4, D)]
        assert s[0].weight == pytest.approx(1 / (1 + np.exp(-1)), abs=1e-14)
