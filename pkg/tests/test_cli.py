import json

import pytest

from recroute.cli import main


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    net, nodes, trips = d / "links.csv", d / "nodes.csv", d / "trips.csv"
    assert main(["generate-network", "--grid", "4x4", "--out", str(net),
                 "--nodes-out", str(nodes), "--id-map", str(d / "ids.csv")]) == 0
    assert main(["simulate", "--network", str(net), "--nodes", str(nodes),
                 "--features", "travel_time,LT", "--theta=-1.5,-0.5", "--dests", "n3_3",
                 "--n", "150", "--min-links", "3", "--seed", "2", "--out", str(trips)]) == 0
    return d, ["--network", str(net), "--nodes", str(nodes)]


def run(capsys, argv):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


class TestCommands:
    def test_corrupt_deterministic(self, files, capsys):
        d, netargs = files
        outs = []
        for name in ("a.csv", "b.csv"):
            code, _, _ = run(capsys, ["corrupt", *netargs, "--trips", str(d / "trips.csv"),
                                      "--p", "0.5", "--seed", "4", "--out", str(d / name),
                                      "--manifest", str(d / (name + ".json"))])
            assert code == 0
            outs.append((d / name).read_bytes())
        assert outs[0] == outs[1]

    @pytest.mark.parametrize("algo", ["dc", "em", "nfxp-i", "nfxp-c"])
    def test_estimate_and_evaluate(self, files, capsys, algo):
        d, netargs = files
        res = d / f"{algo}.json"
        code, out, _ = run(capsys, ["estimate", *netargs, "--features", "travel_time,LT",
                                    "--trips", str(d / "trips.csv"), "--algo", algo,
                                    "--em-max-iter", "3", "--out", str(res)])
        assert code == 0 and algo in out
        assert json.loads(res.read_text())["algorithm"] == algo
        code, out, _ = run(capsys, ["evaluate", *netargs, "--params", str(res),
                                    "--trips", str(d / "trips.csv")])
        assert code == 0
        assert float(out.strip()) < 0 and len(out.strip().splitlines()) == 1

    def test_estimate_json_to_stdout(self, files, capsys):
        d, netargs = files
        code, out, _ = run(capsys, ["estimate", *netargs, "--features", "travel_time,LT",
                                    "--trips", str(d / "trips.csv"), "--algo", "nfxp-c"])
        assert code == 0 and json.loads(out)["converged"] is True

    def test_sweep(self, tmp_path, capsys):
        code, out, _ = run(capsys, ["sweep", "--network", "grid:4x4", "--n-trips", "80",
                                    "--p-grid", "0.5", "--seeds", "1", "--algorithms", "dc,nfxp-i",
                                    "--out", str(tmp_path)])
        assert code == 0 and "p=0.50" in out
        assert (tmp_path / "results.csv").exists()


class TestExitCodes:
    def test_bad_flag(self, capsys):
        assert run(capsys, ["estimate", "--bogus"])[0] == 2

    def test_missing_file(self, files, capsys):
        d, netargs = files
        assert run(capsys, ["corrupt", *netargs, "--trips", str(d / "nope.csv"), "--p", "0.5",
                            "--out", str(d / "x.csv")])[0] == 2

    def test_evaluate_incomplete_trips(self, files, capsys):
        d, netargs = files
        main(["corrupt", *netargs, "--trips", str(d / "trips.csv"), "--p", "0.9",
              "--out", str(d / "c.csv")])
        main(["estimate", *netargs, "--features", "travel_time,LT", "--trips",
              str(d / "trips.csv"), "--algo", "nfxp-c", "--out", str(d / "r.json")])
        capsys.readouterr()
        code, _, err = run(capsys, ["evaluate", *netargs, "--params", str(d / "r.json"),
                                    "--trips", str(d / "c.csv")])
        assert code == 2 and "usage error" in err

    def test_wrong_theta_length(self, files, capsys):
        d, netargs = files
        assert run(capsys, ["simulate", *netargs, "--features", "travel_time,LT", "--theta=-1",
                            "--dests", "n3_3", "--out", str(d / "t.csv")])[0] == 2

    def test_bad_sweep_config(self, tmp_path, capsys):
        assert run(capsys, ["sweep", "--p-grid", "2.0", "--out", str(tmp_path)])[0] == 2

    def test_computational_failure(self, files, capsys, monkeypatch):
        from recroute import cli
        from recroute.exceptions import InfeasibleParameters

        def boom(*a, **kw):
            raise InfeasibleParameters("value function diverged")

        monkeypatch.setattr(cli, "estimate", boom)
        d, netargs = files
        code, _, err = run(capsys, ["estimate", *netargs, "--features", "travel_time,LT",
                                    "--trips", str(d / "trips.csv")])
        assert code == 1 and "diverged" in err
